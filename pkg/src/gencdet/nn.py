"""Small feedforward network engine: forward pass, reverse-mode gradients, Adam.

Parameters live in one flat float64 vector; per-layer weights and biases are
views into it, so the optimizer updates everything with a handful of array ops.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidSpecError, TrainingDivergenceError

ACTIVATIONS = ("leaky-relu", "relu")


@dataclass(frozen=True)
class FnnSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "leaky-relu"
    slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")
        if self.activation == "relu":
            object.__setattr__(self, "slope", 0.0)
        if not 0.0 <= self.slope < 1.0:
            raise InvalidSpecError(f"leaky-relu slope must lie in [0, 1), got {self.slope}")
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(v) <= 0 for v in dims):
            raise InvalidSpecError(f"all layer dimensions must be positive, got {dims}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpecError("seed must be an unsigned 64-bit integer")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "slope": self.slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FnnSpec:
        return cls(
            input_dim=d["input_dim"],
            hidden_widths=tuple(d["hidden_widths"]),
            output_dim=d["output_dim"],
            activation=d["activation"],
            slope=d["slope"],
            seed=d["seed"],
        )


def _layer_views(spec: FnnSpec, flat: np.ndarray):
    dims = spec.layer_dims
    weights, biases = [], []
    pos = 0
    for i in range(len(dims) - 1):
        n_out, n_in = dims[i + 1], dims[i]
        weights.append(flat[pos : pos + n_out * n_in].reshape(n_out, n_in))
        pos += n_out * n_in
        biases.append(flat[pos : pos + n_out])
        pos += n_out
    return weights, biases


@dataclass(eq=False)
class FnnParams:
    """Weights ``A_i`` of shape (out, in) and biases ``b_i`` backed by ``flat``."""

    spec: FnnSpec
    flat: np.ndarray
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise DimensionError(
                f"expected {self.spec.n_params} parameters, got {self.flat.shape}"
            )
        self.weights, self.biases = _layer_views(self.spec, self.flat)

    def copy(self) -> FnnParams:
        return FnnParams(self.spec, self.flat.copy())


def init_params(spec: FnnSpec) -> FnnParams:
    """He-scaled Gaussian weights, zero biases; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(int(spec.seed))
    params = FnnParams(spec, np.zeros(spec.n_params))
    for w in params.weights:
        fan_in = w.shape[1]
        w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
    return params


def activate(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _as_batch(params: FnnParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise DimensionError(
            f"input has shape {x.shape}, expected (*, {params.spec.input_dim})"
        )
    return x, single


def forward(params: FnnParams, x, return_cache: bool = False):
    """Evaluate the network on a vector or on a batch of row vectors.

    Hidden layers apply the (leaky) ReLU; the last layer is affine only.
    With ``return_cache`` the pre-activations are returned for :func:`backward`.
    """
    h, single = _as_batch(params, x)
    slope = params.spec.slope
    inputs, pre = [h], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if i < last:
            pre.append(z)
            h = activate(z, slope)
            inputs.append(h)
        else:
            h = z
    out = h[0] if single else h
    if return_cache:
        return out, (inputs, pre)
    return out


def backward(params: FnnParams, x, upstream_grad, cache=None):
    """Reverse-mode gradient of ``sum(upstream_grad * forward(params, x))``.

    Returns ``(grad_flat, grad_x)``; for a batch the parameter gradient is
    summed over rows. The activation derivative at exactly zero is the slope.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.spec.output_dim):
        raise DimensionError(
            f"upstream gradient has shape {g.shape}, expected "
            f"({xb.shape[0]}, {params.spec.output_dim})"
        )
    if cache is None:
        _, cache = forward(params, xb, return_cache=True)
    inputs, pre = cache
    slope = params.spec.slope
    grad = np.empty_like(params.flat)
    gw, gb = _layer_views(params.spec, grad)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i][...] = g.T @ inputs[i]
        gb[i][...] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = np.where(pre[i - 1] > 0, g, slope * g)
    grad_x = g[0] if single else g
    return grad, grad_x


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: FnnParams, lr: float = 1e-3, **kw) -> AdamState:
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), lr=lr, **kw)


def adam_step(params: FnnParams, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise DimensionError("gradient/moment shapes do not match parameters")
    if not np.isfinite(grads).all():
        raise TrainingDivergenceError(f"non-finite gradient at Adam step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    lr_t = state.lr * np.sqrt(1.0 - b2**state.step) / (1.0 - b1**state.step)
    # eps is applied to the bias-corrected second moment
    eps_t = state.eps * np.sqrt(1.0 - b2**state.step)
    params.flat -= lr_t * state.m / (np.sqrt(state.v) + eps_t)
    return params, state
