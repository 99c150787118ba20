"""Reading and writing comma-separated tables and key-value reports."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DataError, InvalidSpecError


@dataclass(frozen=True)
class ColumnRoles:
    """Which header names hold the response and which hold the covariates."""

    response: tuple
    covariates: tuple

    def __post_init__(self):
        object.__setattr__(self, "response", tuple(self.response))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.response or not self.covariates:
            raise InvalidSpecError("response and covariate column lists must both be non-empty")
        both = set(self.response) & set(self.covariates)
        if both:
            raise InvalidSpecError(f"columns used as both response and covariate: {sorted(both)}")
        for group in (self.response, self.covariates):
            if len(set(group)) != len(group):
                raise InvalidSpecError(f"duplicate column in {list(group)}")

    @classmethod
    def parse(cls, text: str) -> ColumnRoles:
        """Parse ``"y1,y2|x1,x2"``."""
        if text.count("|") != 1:
            raise InvalidSpecError(f"column roles must look like 'y|x1,x2', got {text!r}")
        left, right = text.split("|")
        split = lambda s: [c.strip() for c in s.split(",") if c.strip()]
        return cls(split(left), split(right))

    @property
    def columns(self) -> tuple:
        return self.response + self.covariates


def _as_roles(column_roles) -> ColumnRoles:
    if isinstance(column_roles, ColumnRoles):
        return column_roles
    if isinstance(column_roles, str):
        return ColumnRoles.parse(column_roles)
    response, covariates = column_roles
    return ColumnRoles(response, covariates)


def _to_float(cell: str) -> float:
    value = float(cell)
    if not math.isfinite(value):
        raise ValueError(cell)
    return value


def load_table(path, column_roles) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    ``column_roles`` is a :class:`ColumnRoles`, a ``"y|x1,x2"`` string or a
    ``(response, covariates)`` pair of name lists. Rows with a missing or
    non-numeric value in any selected column are dropped with a warning that
    lists their 1-based data-row numbers.
    """
    roles = _as_roles(column_roles)
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in header]
        missing = [c for c in roles.columns if c not in header]
        if missing:
            raise DataError(f"{path}: column(s) not found in header: {', '.join(missing)}")
        where = [header.index(c) for c in roles.columns]
        rows, bad = [], []
        for number, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                rows.append([_to_float(row[i]) for i in where])
            except (ValueError, IndexError):
                bad.append(number)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        warnings.warn(f"{path}: excluded {len(bad)} row(s) with missing or non-numeric values: {shown}", RuntimeWarning, stacklevel=2)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    table = np.array(rows, dtype=np.float64)
    p = len(roles.response)
    return Dataset(table[:, :p], table[:, p:])


def default_names(data: Dataset) -> ColumnRoles:
    ys = ["y"] if data.p == 1 else [f"y{i + 1}" for i in range(data.p)]
    return ColumnRoles(ys, [f"x{i + 1}" for i in range(data.d)])


def write_table(data: Dataset, path, column_roles=None) -> ColumnRoles:
    """Write ``data`` as CSV; values use ``repr`` so re-reading is exact."""
    roles = default_names(data) if column_roles is None else _as_roles(column_roles)
    if len(roles.response) != data.p or len(roles.covariates) != data.d:
        raise InvalidSpecError("column names do not match the dataset's dimensions")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(roles.columns)
        for row in data.joint():
            w.writerow([repr(float(v)) for v in row])
    return roles


def format_report(items) -> str:
    """Render ``(key, value)`` pairs as one ``key=value`` line each."""
    lines = []
    for key, value in items:
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        text = str(value)
        if "\n" in text:
            raise ValueError(f"report value for {key!r} spans lines")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key] = value
    return out
