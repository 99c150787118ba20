"""Paired response/covariate container."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response matrix ``y`` (n, p) and covariate matrix ``x`` (n, d) sharing rows."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 2 or x.ndim != 2:
            raise DimensionError("y and x must be 2-D arrays")
        if y.shape[0] != x.shape[0]:
            raise DimensionError(
                f"row count mismatch: y has {y.shape[0]} rows, x has {x.shape[0]}"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.y.shape == other.y.shape
            and self.x.shape == other.x.shape
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
        )

    def joint(self) -> np.ndarray:
        """Rows of ``(y, x)`` stacked horizontally."""
        return np.hstack([self.y, self.x])

    def take(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.x[idx])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.y).all() and np.isfinite(self.x).all())


def split_halves(data: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Randomly split into two equal halves, dropping one random row if n is odd."""
    perm = rng.permutation(data.n)
    m = data.n // 2
    return data.take(perm[:m]), data.take(perm[m : 2 * m])
