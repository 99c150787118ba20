"""Generative permutation test: bin the pooled samples, compare cell counts with a
two-sample U-statistic, calibrate by random permutations of the pooled labels.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import mdn as mdn_mod
from .data import Dataset, split_halves
from .errors import DimensionError, PreconditionError

_MAX_INT_CELLS = 2**62


def n_cells_per_axis(r: float) -> int:
    # tolerance guards 1/(1/3) = 3.0000000000000004
    return max(1, math.ceil(1.0 / r - 1e-9))


@dataclass(frozen=True, eq=False)
class BinGrid:
    """Equal-side hypercube partition of [0, 1]^dims plus the map into the cube."""

    dims: int
    side: float
    low: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.dims < 1:
            raise PreconditionError("grid needs at least one dimension")
        if not 0.0 < self.side <= 1.0:
            raise PreconditionError(f"bin side length must lie in (0, 1], got {self.side}")

    @property
    def cells_per_axis(self) -> int:
        return n_cells_per_axis(self.side)

    @property
    def n_cells(self) -> int:
        return self.cells_per_axis**self.dims

    @classmethod
    def fit(cls, pooled: np.ndarray, side: float) -> BinGrid:
        """Min-max map fitted on the pooled rows of both samples."""
        pooled = np.asarray(pooled, dtype=np.float64)
        lo = pooled.min(axis=0)
        scale = pooled.max(axis=0) - lo
        scale = np.where(scale > 0, scale, 1.0)
        return cls(pooled.shape[1], side, lo, scale)

    def normalise(self, z: np.ndarray) -> np.ndarray:
        if self.low is None:
            return np.asarray(z, dtype=np.float64)
        return (np.asarray(z, dtype=np.float64) - self.low) / self.scale

    def summary(self) -> dict:
        return {"dims": self.dims, "side": self.side, "cells_per_axis": self.cells_per_axis}


@dataclass(frozen=True, eq=False)
class DiscretizedSample:
    """Per-axis bin indices (n, dims) and 1-based row-major cell indices."""

    axes: np.ndarray
    grid: BinGrid
    n_clamped: int = 0

    @property
    def cells(self) -> np.ndarray:
        k = self.grid.cells_per_axis
        if self.grid.n_cells < _MAX_INT_CELLS:
            weights = k ** np.arange(self.grid.dims - 1, -1, -1, dtype=np.int64)
            return self.axes.astype(np.int64) @ weights + 1
        # exact Python integers once the cell count exceeds int64
        out = np.empty(len(self.axes), dtype=object)
        for i, row in enumerate(self.axes):
            v = 0
            for a in row:
                v = v * k + int(a)
            out[i] = v + 1
        return out

    def __len__(self) -> int:
        return self.axes.shape[0]


def discretize(data, grid: BinGrid) -> DiscretizedSample:
    """Map each row of ``(y, x)`` to its grid cell.

    Points on the upper face clamp into the last cell; points that fall outside
    the unit cube after normalisation are clamped and counted with a warning.
    """
    z = data.joint() if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=np.float64))
    if z.shape[1] != grid.dims:
        raise DimensionError(f"data has {z.shape[1]} columns, grid has {grid.dims} dims")
    z = grid.normalise(z)
    outside = ((z < 0) | (z > 1)).any(axis=1)
    n_out = int(outside.sum())
    if n_out:
        warnings.warn(f"{n_out} point(s) outside [0, 1] after normalisation were clamped", RuntimeWarning, stacklevel=2)
    k = grid.cells_per_axis
    axes = np.clip(np.floor(np.clip(z, 0.0, 1.0) / grid.side), 0, k - 1).astype(np.int64)
    return DiscretizedSample(axes, grid, n_out)


def kernel_w(u1, u2) -> int:
    return int(u1 == u2)


def kernel_h(u1, u2, v1, v2) -> int:
    """Within-sample matches minus cross-sample matches for one quadruple."""
    return kernel_w(u1, u2) + kernel_w(v1, v2) - kernel_w(u1, v2) - kernel_w(u2, v1)


def _codes(s1, s2) -> tuple[np.ndarray, int]:
    """Compress the pooled cell labels of two samples to 0..K-1."""
    a1 = s1.axes if isinstance(s1, DiscretizedSample) else np.asarray(s1).reshape(len(s1), -1)
    a2 = s2.axes if isinstance(s2, DiscretizedSample) else np.asarray(s2).reshape(len(s2), -1)
    pooled = np.concatenate([a1, a2], axis=0)
    _, inv = np.unique(pooled, axis=0, return_inverse=True)
    inv = inv.reshape(-1).astype(np.int64)
    return inv, int(inv.max()) + 1 if inv.size else 0


def u_numerator(c1: np.ndarray, c2: np.ndarray) -> int:
    """Integer ``m * sum_k [c1(c1-1) + c2(c2-1)] - 2(m-1) sum_k c1 c2``.

    Dividing by ``m * m * (m - 1)`` gives the U-statistic; keeping the integer
    form makes permutation comparisons exact.
    """
    c1 = np.asarray(c1, dtype=np.int64)
    c2 = np.asarray(c2, dtype=np.int64)
    m = int(c1.sum())
    within = int((c1 * (c1 - 1)).sum() + (c2 * (c2 - 1)).sum())
    cross = int((c1 * c2).sum())
    return m * within - 2 * (m - 1) * cross


def _u_denominator(m: int) -> int:
    return m * m * (m - 1)


def u_statistic(s1, s2) -> float:
    """Two-sample U-statistic over ordered distinct pairs, from cell counts."""
    m = len(s1)
    if len(s2) != m:
        raise PreconditionError(f"samples must have equal size, got {m} and {len(s2)}")
    if m < 2:
        raise PreconditionError("each sample needs at least 2 points")
    codes, k = _codes(s1, s2)
    c1 = np.bincount(codes[:m], minlength=k)
    c2 = np.bincount(codes[m:], minlength=k)
    return u_numerator(c1, c2) / _u_denominator(m)


def u_statistic_naive(s1, s2) -> float:
    """Direct quadruple sum; O(m^4), for verification only."""
    m = len(s1)
    total = 0
    for i1 in range(m):
        for i2 in range(m):
            if i1 == i2:
                continue
            for j1 in range(m):
                for j2 in range(m):
                    if j1 != j2:
                        total += kernel_h(s1[i1], s1[i2], s2[j1], s2[j2])
    return total / (m * (m - 1)) ** 2


@dataclass
class PermTestOutcome:
    u_stat: float
    p_value: float
    critical_value: float
    n_permutations: int
    alpha: float
    reject: bool
    grid: dict = field(default_factory=dict)
    scales: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _check_perm_args(alpha: float, n_perm: int) -> None:
    if not 0.0 < alpha < 1.0:
        raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
    if n_perm < 1:
        raise PreconditionError("n_perm must be positive")
    if alpha * (n_perm + 1) < 1.0 - 1e-12:
        raise PreconditionError(
            f"n_perm={n_perm} too small for alpha={alpha}: need alpha*(n_perm+1) >= 1"
        )


def _pooled_grid(a: Dataset, b: Dataset, side: float) -> BinGrid:
    if a.n != b.n:
        raise PreconditionError(f"samples must have equal size, got {a.n} and {b.n}")
    if a.n < 2:
        raise PreconditionError("each sample needs at least 2 rows")
    if (a.p, a.d) != (b.p, b.d):
        raise DimensionError("samples have different (p, d)")
    return BinGrid.fit(np.vstack([a.joint(), b.joint()]), side)


def _perm_outcome(s1, s2, uniforms, alpha, grid) -> PermTestOutcome:
    m = len(s1)
    codes, k = _codes(s1, s2)
    obs = u_numerator(np.bincount(codes[:m], minlength=k), np.bincount(codes[m:], minlength=k))
    perm = kernels.perm_u_numerators(codes, m, k, uniforms)
    n_perm = len(perm)
    den = _u_denominator(m)
    p_value = (1 + int((perm >= obs).sum())) / (n_perm + 1)
    crit = float(np.quantile(perm, 1.0 - alpha, method="higher")) / den
    return PermTestOutcome(
        u_stat=obs / den,
        p_value=p_value,
        critical_value=crit,
        n_permutations=n_perm,
        alpha=alpha,
        reject=p_value <= alpha,
        grid=grid.summary(),
    )


def permutation_test(d_hat21: Dataset, d22: Dataset, alpha: float, r: float, n_perm: int = 500, seed=0) -> PermTestOutcome:
    """Monte Carlo permutation test of equal joint distributions on a grid of side ``r``.

    p-value is ``(1 + #{U_b >= U_obs}) / (n_perm + 1)``; reject iff it is at most alpha.
    """
    _check_perm_args(alpha, n_perm)
    grid = _pooled_grid(d_hat21, d22, r)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    uniforms = rng.random((n_perm, d_hat21.n))
    return _perm_outcome(discretize(d_hat21, grid), discretize(d22, grid), uniforms, alpha, grid)


def default_side(n2: int, p: int, d: int, smoothness: float = 2.0) -> float:
    """Side length ``1 / floor(n2^(2 / (4 beta + d + p)))`` for an assumed smoothness beta."""
    k = math.floor(n2 ** (2.0 / (4.0 * smoothness + d + p)))
    return 1.0 / max(k, 1)


def adaptive_grid(p: int, d: int, n2: int) -> tuple[int, list[float]]:
    """Number of dyadic scales ``v`` and the side lengths 1/2, ..., 1/2^v."""
    half = n2 / 2.0
    if half <= math.e:
        raise PreconditionError(f"adaptive grid needs n2/2 > e, got n2={n2}")
    v = math.ceil((2.0 / (p + d)) * math.log2(half / math.log(math.log(half))))
    v = max(v, 1)
    return v, [2.0**-j for j in range(1, v + 1)]


def adaptive_permutation_test(
    d_hat21: Dataset, d22: Dataset, alpha: float, n_perm: int = 500, seed=0, delta: float = 0.0
) -> PermTestOutcome:
    """Bonferroni maximum of permutation tests over the dyadic side lengths.

    One set of permutations is shared by every scale. Each scale is run at
    level ``(alpha - delta) / v``.
    """
    if not 0.0 <= delta < alpha:
        raise PreconditionError("delta must lie in [0, alpha)")
    v, sides = adaptive_grid(d_hat21.p, d_hat21.d, 2 * d_hat21.n)
    level = (alpha - delta) / v
    _check_perm_args(level, n_perm)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    uniforms = rng.random((n_perm, d_hat21.n))
    scales = []
    for side in sides:
        grid = _pooled_grid(d_hat21, d22, side)
        scales.append(_perm_outcome(discretize(d_hat21, grid), discretize(d22, grid), uniforms, level, grid))
    best = min(scales, key=lambda o: o.p_value)
    return PermTestOutcome(
        u_stat=best.u_stat,
        p_value=min(1.0, v * best.p_value),
        critical_value=best.critical_value,
        n_permutations=n_perm,
        alpha=alpha,
        reject=any(o.reject for o in scales),
        grid=best.grid,
        scales=[(o.grid["side"], o.u_stat, o.p_value, o.reject) for o in scales],
    )


def fit_or_reuse(data1, data2: Dataset, mdn_spec, train_ss, generator=None):
    """Train a generator on ``data1`` unless a fitted one is supplied."""
    if generator is not None:
        if (generator.spec.p, generator.spec.d) != (data2.p, data2.d):
            raise DimensionError("generator and data2 have different (p, d)")
        return generator
    if data1 is None:
        raise PreconditionError("either data1 or a trained generator is required")
    if (data1.p, data1.d) != (data2.p, data2.d):
        raise DimensionError("data1 and data2 have different (p, d)")
    if mdn_spec is None:
        mdn_spec = mdn_mod.MdnSpec.build(data1.p, data1.d)
    return mdn_mod.train(data1, mdn_spec, seed=int(train_ss.generate_state(1, np.uint64)[0]))


def generator_info(gen) -> dict:
    if gen.summary is None:
        return {"mdn_source": "supplied"}
    return {
        "mdn_source": "trained",
        "mdn_epochs": gen.summary.epochs_run,
        "mdn_best_epoch": gen.summary.best_epoch,
        "mdn_best_validation_nll": gen.summary.best_validation_nll,
    }


def _prepare(data1, data2: Dataset, mdn_spec, seed, min_n2: int, generator=None):
    if data2.n < min_n2:
        raise PreconditionError(f"need n2 >= {min_n2}, got {data2.n}")
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    train_ss, split_ss, gen_ss, perm_ss = ss.spawn(4)
    gen = fit_or_reuse(data1, data2, mdn_spec, train_ss, generator)
    d21, d22 = split_halves(data2, np.random.default_rng(split_ss))
    d_hat21 = mdn_mod.generate_dataset(gen, d21.x, np.random.default_rng(gen_ss))
    return gen, d_hat21, d22, np.random.default_rng(perm_ss)


def gp_cdet(
    data1: Dataset,
    data2: Dataset,
    alpha: float = 0.05,
    r: float | None = None,
    mdn_spec=None,
    n_perm: int = 500,
    seed=0,
    smoothness: float = 2.0,
    generator=None,
) -> PermTestOutcome:
    """Train the generator on ``data1``, then permutation-test generated vs held-out halves of ``data2``.

    Passing a fitted ``generator`` skips training; ``data1`` may then be None.
    """
    _check_perm_args(alpha, n_perm)
    gen, d_hat21, d22, rng = _prepare(data1, data2, mdn_spec, seed, 4, generator)
    if r is None:
        r = default_side(data2.n, data2.p, data2.d, smoothness)
    out = permutation_test(d_hat21, d22, alpha, r, n_perm, rng)
    out.extra.update(generator_info(gen))
    return out


def adaptive_gp_cdet(
    data1: Dataset,
    data2: Dataset,
    alpha: float = 0.05,
    mdn_spec=None,
    n_perm: int = 500,
    seed=0,
    delta: float = 0.0,
    generator=None,
) -> PermTestOutcome:
    """Multi-resolution version of :func:`gp_cdet` that needs no smoothness guess."""
    _check_perm_args(alpha, n_perm)
    gen, d_hat21, d22, rng = _prepare(data1, data2, mdn_spec, seed, 6, generator)
    out = adaptive_permutation_test(d_hat21, d22, alpha, n_perm, rng, delta)
    out.extra.update(generator_info(gen))
    return out
