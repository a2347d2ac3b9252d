"""Site-level individual data and the shared calibration feature map."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch, MissingValues
from .numlin import dsum_rows
from .outcome import check_covariates


@dataclass(frozen=True)
class SiteDataset:
    """Individual-level rows of one site. Never leaves the site.

    Rows are stored in a canonical (lexicographic) order so every downstream
    computation is independent of the order the records arrived in.
    """

    site: int
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if np.isnan(y).any():
            raise MissingValues(f"site {self.site}: outcome has missing values")
        X = check_covariates(self.X, f"site {self.site} covariates")
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"site {self.site}: {y.shape[0]} outcomes but {X.shape[0]} covariate rows")
        if y.shape[0] == 0:
            raise DimensionMismatch(f"site {self.site} has no rows")
        order = np.lexsort(tuple(X[:, j] for j in reversed(range(X.shape[1]))) + (y,))
        y, X = y[order], X[order]
        y.flags.writeable = False
        X.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True)
class CalibrationFeatures:
    """g(X) without its constant: selected covariates, optionally with squares."""

    columns: tuple | None = None
    squares: bool = False

    def __call__(self, X) -> np.ndarray:
        X = check_covariates(X)
        cols = range(X.shape[1]) if self.columns is None else self.columns
        try:
            base = X[:, list(cols)]
        except IndexError as exc:
            raise DimensionMismatch(f"calibration columns {self.columns} out of range") from exc
        return np.hstack([base, base**2]) if self.squares else base

    def mean(self, X) -> np.ndarray:
        g = self(X)
        return dsum_rows(g) / g.shape[0]

    def to_dict(self) -> dict:
        return {"columns": None if self.columns is None else list(self.columns), "squares": self.squares}

    @classmethod
    def from_dict(cls, d: dict | None) -> "CalibrationFeatures":
        d = d or {}
        cols = d.get("columns")
        return cls(None if cols is None else tuple(int(c) for c in cols), bool(d.get("squares", False)))


def read_site_csv(path, site: int) -> SiteDataset:
    """Read a per-site CSV with header ``y,x1,...,xp``."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0][0].strip() != "y":
        raise ConfigError(f"{path}: first header column must be 'y'")
    body = [r for r in rows[1:] if r]
    try:
        arr = np.array([[float(v) if v.strip() not in ("", "NA", "nan") else np.nan for v in r] for r in body])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric cell ({exc})") from exc
    if arr.ndim != 2 or arr.shape[1] != len(rows[0]):
        raise ConfigError(f"{path}: ragged rows")
    return SiteDataset(site, arr[:, 0], arr[:, 1:])


def write_site_csv(ds: SiteDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y"] + [f"x{j + 1}" for j in range(ds.p)])
        for yi, xi in zip(ds.y, ds.X):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi])
