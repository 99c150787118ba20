"""Gaussian mixture density network used as the conditional generator.

The backbone maps a covariate vector to ``G * (p + 2)`` raw outputs: G mixing
logits, G isotropic means in R^p and G raw scales. Mixing weights go through a
softmax and scales through a floored softplus. Training maximises the mean
log-likelihood on min-max normalised data by minibatch Adam with early
stopping on a held-out validation split.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels, nn
from .data import Dataset
from .errors import (
    DataError,
    DimensionError,
    InvalidSpecError,
    PreconditionError,
    TrainingDivergenceError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    min_epochs: int = 50
    validation_fraction: float = 0.1
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidSpecError("batch_size, max_epochs and patience must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise InvalidSpecError("validation_fraction must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise InvalidSpecError("learning_rate must be positive")


@dataclass(frozen=True)
class MdnSpec:
    p: int
    d: int
    n_components: int
    backbone: nn.FnnSpec
    sigma_floor: float = 1e-3
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.n_components < 1:
            raise InvalidSpecError("mixture count G must be at least 1")
        if self.p < 1 or self.d < 1:
            raise InvalidSpecError("p and d must be positive")
        if self.backbone.input_dim != self.d:
            raise InvalidSpecError("backbone input_dim must equal d")
        if self.backbone.output_dim != self.n_components * (self.p + 2):
            raise InvalidSpecError(
                f"backbone output_dim must be G(p+2) = {self.n_components * (self.p + 2)}"
            )
        if not self.sigma_floor > 0:
            raise InvalidSpecError("sigma_floor must be positive")

    @classmethod
    def build(
        cls,
        p: int,
        d: int,
        n_components: int = 2,
        hidden_widths=(8, 4),
        slope: float = 0.01,
        sigma_floor: float = 1e-3,
        training: TrainingConfig | None = None,
        seed: int = 0,
    ) -> MdnSpec:
        backbone = nn.FnnSpec(
            input_dim=d,
            hidden_widths=tuple(hidden_widths),
            output_dim=n_components * (p + 2),
            activation="leaky-relu",
            slope=slope,
            seed=seed,
        )
        return cls(p, d, n_components, backbone, sigma_floor, training or TrainingConfig())

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "d": self.d,
            "n_components": self.n_components,
            "backbone": self.backbone.to_dict(),
            "sigma_floor": self.sigma_floor,
            "training": vars(self.training).copy(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MdnSpec:
        return cls(
            p=d["p"],
            d=d["d"],
            n_components=d["n_components"],
            backbone=nn.FnnSpec.from_dict(d["backbone"]),
            sigma_floor=d["sigma_floor"],
            training=TrainingConfig(**d["training"]),
        )


@dataclass(frozen=True, eq=False)
class MinMaxMap:
    """Per-coordinate affine map ``z = (v - low) / scale`` into [0, 1]."""

    low: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, what: str = "column") -> MinMaxMap:
        values = np.asarray(values, dtype=np.float64)
        lo = values.min(axis=0)
        hi = values.max(axis=0)
        scale = hi - lo
        flat = ~(scale > 0)
        if flat.any():
            cols = np.flatnonzero(flat).tolist()
            warnings.warn(
                f"constant {what}(s) {cols}: widening to unit range for normalisation",
                RuntimeWarning,
                stacklevel=3,
            )
            lo = np.where(flat, lo - 0.5, lo)
            scale = np.where(flat, 1.0, scale)
        return cls(lo, scale)

    def __call__(self, values):
        return (np.asarray(values, dtype=np.float64) - self.low) / self.scale

    def inverse(self, z):
        return self.low + np.asarray(z, dtype=np.float64) * self.scale


@dataclass(frozen=True)
class CondDensityEval:
    value: float
    log_value: float


@dataclass
class TrainingSummary:
    epochs_run: int
    best_epoch: int
    best_validation_nll: float
    train_nll: list = field(default_factory=list)
    validation_nll: list = field(default_factory=list)
    checkpoint_nll: list = field(default_factory=list)


def _softplus(s):
    return np.logaddexp(0.0, s)


def _head_batch(raw: np.ndarray, n_comp: int, sigma_floor: float):
    n, width = raw.shape
    p = width // n_comp - 2
    logits = raw[:, :n_comp]
    alphas = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    mus = raw[:, n_comp : n_comp + n_comp * p].reshape(n, n_comp, p)
    sigmas = sigma_floor + _softplus(raw[:, n_comp + n_comp * p :])
    return alphas, mus, sigmas


def head_transform(raw, n_components: int, p: int, sigma_floor: float = 1e-3):
    """Split a raw output vector into (mixing weights, means (G, p), scales)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (n_components * (p + 2),):
        raise DimensionError(f"raw head must have length {n_components * (p + 2)}")
    alphas, mus, sigmas = _head_batch(raw[None, :], n_components, sigma_floor)
    return alphas[0], mus[0], sigmas[0]


@dataclass(eq=False)
class MdnGenerator:
    """A trained mixture density network with its normalisation maps.

    Density methods work in normalised [0, 1] coordinates; sampling takes
    covariates in original units and returns responses in original units.
    """

    spec: MdnSpec
    params: nn.FnnParams
    y_map: MinMaxMap
    x_map: MinMaxMap
    summary: TrainingSummary | None = None

    def raw(self, x_norm) -> np.ndarray:
        x_norm = np.atleast_2d(np.asarray(x_norm, dtype=np.float64))
        return nn.forward(self.params, x_norm)

    def mixture(self, x_norm):
        """Mixing weights (n, G), means (n, G, p) and scales (n, G) at normalised covariates."""
        return _head_batch(self.raw(x_norm), self.spec.n_components, self.spec.sigma_floor)

    def log_density(self, y_norm, x_norm) -> np.ndarray:
        y_norm = np.atleast_2d(np.asarray(y_norm, dtype=np.float64))
        raw = self.raw(x_norm)
        if y_norm.shape != (raw.shape[0], self.spec.p):
            raise DimensionError(f"y has shape {y_norm.shape}, expected ({raw.shape[0]}, {self.spec.p})")
        if not (np.isfinite(y_norm).all() and np.isfinite(raw).all()):
            raise DataError("non-finite input to log_density")
        return kernels.mdn_log_density(raw, y_norm, self.spec.n_components, self.spec.sigma_floor)

    def log_density_original(self, y, x) -> np.ndarray:
        """Conditional log-density in original units (includes the Jacobian of the map)."""
        jac = np.log(self.y_map.scale).sum()
        return self.log_density(self.y_map(np.atleast_2d(y)), self.x_map(np.atleast_2d(x))) - jac

    def sample_batch(self, x, rng: np.random.Generator) -> np.ndarray:
        """One draw of Y | X = x for every row of ``x`` (original units)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.d:
            raise DimensionError(f"covariates have {x.shape[1]} columns, expected {self.spec.d}")
        n = x.shape[0]
        if n == 0:
            return np.empty((0, self.spec.p))
        alphas, mus, sigmas = self.mixture(self.x_map(x))
        cdf = np.cumsum(alphas, axis=1)
        u = rng.random(n)
        comp = np.minimum((cdf < u[:, None]).sum(axis=1), self.spec.n_components - 1)
        w = rng.standard_normal((n, self.spec.p))
        rows = np.arange(n)
        y_norm = mus[rows, comp] + sigmas[rows, comp][:, None] * w
        return self.y_map.inverse(y_norm)

    def conditional_mean(self, x) -> np.ndarray:
        """E[Y | X = x] in original units."""
        alphas, mus, _ = self.mixture(self.x_map(np.atleast_2d(x)))
        return self.y_map.inverse(np.einsum("ng,ngp->np", alphas, mus))

    def save(self, path) -> None:
        meta = {
            "format": "gencdet-mdn",
            "version": 1,
            "spec": self.spec.to_dict(),
        }
        with open(path, "wb") as fh:
            np.savez(
                fh,
                meta=np.array(json.dumps(meta)),
                params=self.params.flat,
                y_low=self.y_map.low,
                y_scale=self.y_map.scale,
                x_low=self.x_map.low,
                x_scale=self.x_map.scale,
            )

    @classmethod
    def load(cls, path) -> MdnGenerator:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != "gencdet-mdn":
                raise DataError(f"{path} is not a saved generator")
            spec = MdnSpec.from_dict(meta["spec"])
            return cls(
                spec,
                nn.FnnParams(spec.backbone, z["params"].copy()),
                MinMaxMap(z["y_low"].copy(), z["y_scale"].copy()),
                MinMaxMap(z["x_low"].copy(), z["x_scale"].copy()),
            )


def log_density(gen: MdnGenerator, y, x) -> float:
    """Log conditional density at a single (y, x) pair in normalised coordinates."""
    return float(gen.log_density(np.asarray(y, dtype=np.float64)[None, :], np.asarray(x, dtype=np.float64)[None, :])[0])


def density(gen: MdnGenerator, y, x) -> CondDensityEval:
    lv = log_density(gen, y, x)
    return CondDensityEval(float(np.exp(lv)), lv)


def _init_head_bias(params: nn.FnnParams, spec: MdnSpec, y_train: np.ndarray, rng) -> None:
    # Start every component near the marginal response distribution.
    G, p = spec.n_components, spec.p
    b = params.biases[-1]
    spread = max(float(y_train.std(axis=0).mean()), 10 * spec.sigma_floor)
    for g in range(G):
        b[G + g * p : G + (g + 1) * p] = y_train.mean(axis=0) + 0.1 * spread * rng.standard_normal(p)
    target = max(spread - spec.sigma_floor, 1e-6)
    b[G + G * p :] = np.log(np.expm1(target))
    params.weights[-1][...] *= 0.1


def _nll(params, spec, y, x, batch=4096) -> float:
    total = 0.0
    for start in range(0, y.shape[0], batch):
        raw = nn.forward(params, x[start : start + batch])
        total += -kernels.mdn_log_density(raw, y[start : start + batch], spec.n_components, spec.sigma_floor).sum()
    return total / y.shape[0]


def train(data1: Dataset, spec: MdnSpec, seed: int = 0) -> MdnGenerator:
    """Fit the mixture density network to ``data1`` by maximum likelihood."""
    cfg = spec.training
    if data1.p != spec.p or data1.d != spec.d:
        raise DimensionError(f"data has (p, d) = ({data1.p}, {data1.d}), spec expects ({spec.p}, {spec.d})")
    if data1.n < cfg.batch_size:
        raise PreconditionError(f"need at least batch_size={cfg.batch_size} rows, got {data1.n}")
    if not data1.is_finite():
        raise DataError("training data contains non-finite values")

    ss = np.random.SeedSequence(int(seed))
    init_ss, split_ss, batch_ss = ss.spawn(3)
    y_map = MinMaxMap.fit(data1.y, "response column")
    x_map = MinMaxMap.fit(data1.x, "covariate column")
    y = y_map(data1.y)
    x = x_map(data1.x)

    rng = np.random.default_rng(split_ss)
    order = rng.permutation(data1.n)
    n_val = int(round(cfg.validation_fraction * data1.n))
    if n_val > 0 and data1.n - n_val < 1:
        n_val = 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    y_tr, x_tr = y[tr_idx], x[tr_idx]
    y_val, x_val = y[val_idx], x[val_idx]

    init_seed = int(np.random.default_rng(init_ss).integers(2**63))
    backbone = nn.FnnSpec(**{**spec.backbone.to_dict(), "seed": init_seed})
    params = nn.init_params(backbone)
    params = nn.FnnParams(spec.backbone, params.flat)
    _init_head_bias(params, spec, y_tr, np.random.default_rng(init_ss))
    state = nn.AdamState.for_params(params, lr=cfg.learning_rate)

    batch_rng = np.random.default_rng(batch_ss)
    n_tr = y_tr.shape[0]
    m = min(cfg.batch_size, n_tr)
    n_batches = n_tr // m
    best = np.inf
    best_flat = params.flat.copy()
    best_epoch = 0
    since_best = 0
    summary = TrainingSummary(0, 0, np.inf)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = batch_rng.permutation(n_tr)
        epoch_loss, state.step, status = kernels.mdn_train_epoch(
            params.flat, spec.backbone.layer_dims, spec.backbone.slope, x_tr, y_tr, perm, m,
            spec.n_components, spec.sigma_floor, state.m, state.v, state.step,
            state.lr, state.beta1, state.beta2, state.eps,
        )  # fmt: skip
        if status == 1:
            raise TrainingDivergenceError(f"non-finite training loss at epoch {epoch}")
        if status == 2:
            raise TrainingDivergenceError(f"non-finite gradient at epoch {epoch}")
        summary.train_nll.append(epoch_loss / (n_batches * m))
        val = _nll(params, spec, y_val, x_val) if n_val else summary.train_nll[-1]
        if not np.isfinite(val):
            raise TrainingDivergenceError(f"non-finite validation loss at epoch {epoch}")
        summary.validation_nll.append(val)
        if val < best:
            best = val
            best_flat = params.flat.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        summary.checkpoint_nll.append(best)
        summary.epochs_run = epoch
        if since_best >= cfg.patience and epoch >= cfg.min_epochs:
            break

    summary.best_epoch = best_epoch
    summary.best_validation_nll = float(best)
    log.debug("mdn trained: %d epochs, best epoch %d, val nll %.4f", summary.epochs_run, best_epoch, best)
    return MdnGenerator(spec, nn.FnnParams(spec.backbone, best_flat), y_map, x_map, summary)


def sample(gen: MdnGenerator, x, seed) -> np.ndarray:
    """One draw of Y | X = x (vector of length d) in original units."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise DataError("non-finite covariate vector")
    return gen.sample_batch(x[None, :], np.random.default_rng(seed))[0]


def generate_dataset(gen: MdnGenerator, covariates, seed) -> Dataset:
    """Synthetic responses at every covariate row; covariates pass through unchanged."""
    covariates = np.asarray(covariates, dtype=np.float64)
    if covariates.ndim != 2:
        covariates = covariates.reshape(-1, gen.spec.d)
    if covariates.shape[1] != gen.spec.d:
        raise DimensionError(f"covariates have {covariates.shape[1]} columns, expected {gen.spec.d}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Dataset(gen.sample_batch(covariates, rng), covariates.copy())
