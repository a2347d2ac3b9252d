"""Basis expansions and (weighted) least-squares outcome models.

A fitted model is fully described by its basis (kind plus knot vectors) and
its coefficients, so it can be serialized, shipped to another site and
evaluated there on local covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

from .errors import DegenerateCovariate, DegenerateFeatures, DimensionMismatch, MissingValues

RANK_TOL = 1e-8
KINDS = ("linear", "cubic-spline")
SPLINE_DEGREE = 3


@dataclass(frozen=True)
class BasisSpec:
    """Description of g(X).

    ``knots`` holds one full (clamped) knot vector per covariate once the basis
    has been resolved against data; an unresolved spline basis only carries the
    interior knot counts.
    """

    kind: str = "linear"
    n_knots: tuple = (3,)
    knots: tuple | None = None
    n_covariates: int | None = None
    include_intercept: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}; expected one of {KINDS}")
        nk = self.n_knots
        nk = (int(nk),) if np.isscalar(nk) else tuple(int(k) for k in nk)
        if any(k < 0 for k in nk):
            raise ValueError("knot counts must be >= 0")
        object.__setattr__(self, "n_knots", nk)
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(tuple(float(v) for v in t) for t in self.knots))
        if not self.include_intercept:
            raise ValueError("the intercept is always part of the basis")

    @property
    def resolved(self) -> bool:
        if self.n_covariates is None:
            return False
        return self.kind == "linear" or self.knots is not None

    def knot_count(self, j: int) -> int:
        return self.n_knots[j] if len(self.n_knots) > 1 else self.n_knots[0]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n_knots": list(self.n_knots), "n_covariates": self.n_covariates}
        if self.knots is not None:
            d["knots"] = [list(t) for t in self.knots]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        knots = d.get("knots")
        return cls(
            kind=d["kind"],
            n_knots=tuple(d.get("n_knots", (3,))),
            knots=None if knots is None else tuple(tuple(t) for t in knots),
            n_covariates=d.get("n_covariates"),
        )


def check_covariates(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D")
    if np.isnan(X).any():
        raise MissingValues(f"{name} contains missing values")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains infinite values")
    return X


def _spline_knots(x: np.ndarray, m: int, j: int) -> tuple:
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise DegenerateCovariate(f"covariate {j} is constant; cannot place spline knots")
    interior = np.quantile(x, np.linspace(0.0, 1.0, m + 2)[1:-1]) if m else np.empty(0)
    interior = np.unique(interior[(interior > lo) & (interior < hi)])
    return (lo,) * (SPLINE_DEGREE + 1) + tuple(float(v) for v in interior) + (hi,) * (SPLINE_DEGREE + 1)


def resolve_basis(spec: BasisSpec, X) -> BasisSpec:
    """Fix data-dependent parts of ``spec`` (dimension, knots) from local ``X``."""
    X = check_covariates(X)
    p = X.shape[1]
    if spec.n_covariates is not None and spec.n_covariates != p:
        raise DimensionMismatch(f"basis expects {spec.n_covariates} covariates, data has {p}")
    if spec.kind == "linear":
        return BasisSpec("linear", spec.n_knots, None, p)
    if spec.knots is not None:
        return BasisSpec(spec.kind, spec.n_knots, spec.knots, p)
    if len(spec.n_knots) not in (1, p):
        raise DimensionMismatch(f"{len(spec.n_knots)} knot counts for {p} covariates")
    knots = tuple(_spline_knots(X[:, j], spec.knot_count(j), j) for j in range(p))
    return BasisSpec(spec.kind, spec.n_knots, knots, p)


def expand_basis(X, spec: BasisSpec) -> np.ndarray:
    """Evaluate g(X): a leading constant column, then linear or spline terms.

    Each covariate's cubic B-spline block drops its first basis function, which
    the intercept already spans through the partition of unity. Splines are
    extrapolated polynomially outside the knot range.
    """
    X = check_covariates(X)
    if not spec.resolved:
        spec = resolve_basis(spec, X)
    if X.shape[1] != spec.n_covariates:
        raise DimensionMismatch(f"basis expects {spec.n_covariates} covariates, got {X.shape[1]}")
    cols = [np.ones((X.shape[0], 1))]
    if spec.kind == "linear":
        cols.append(X)
    else:
        for j, t in enumerate(spec.knots):
            t = np.asarray(t)
            nb = len(t) - SPLINE_DEGREE - 1
            block = BSpline(t, np.eye(nb), SPLINE_DEGREE, extrapolate=True)(X[:, j])
            cols.append(block[:, 1:])
    return np.hstack(cols)


@dataclass(frozen=True)
class FittedOutcomeModel:
    basis: BasisSpec | None
    coefficients: np.ndarray
    dropped_columns: tuple = ()
    site: object = None
    subset_tag: tuple | None = None
    n_columns: int = field(default=0)

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float).ravel()
        if not np.all(np.isfinite(coef)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "dropped_columns", tuple(int(c) for c in self.dropped_columns))
        if not self.n_columns:
            object.__setattr__(self, "n_columns", coef.size + len(self.dropped_columns))
        if coef.size + len(self.dropped_columns) != self.n_columns:
            raise DimensionMismatch("coefficient count does not match the retained basis dimension")

    @property
    def retained_columns(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_columns), self.dropped_columns)

    def design(self, X) -> np.ndarray:
        """Retained basis columns evaluated at ``X``."""
        if self.basis is None:
            raise DimensionMismatch("model was fitted on a raw design and has no basis")
        g = expand_basis(X, self.basis)
        return g[:, self.retained_columns]

    def predict(self, X) -> np.ndarray:
        return self.design(X) @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "basis": None if self.basis is None else self.basis.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "dropped_columns": list(self.dropped_columns),
            "n_columns": self.n_columns,
            "site": self.site,
            "subset_tag": None if self.subset_tag is None else list(self.subset_tag),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedOutcomeModel":
        tag = d.get("subset_tag")
        return cls(
            basis=None if d.get("basis") is None else BasisSpec.from_dict(d["basis"]),
            coefficients=np.array(d["coefficients"], dtype=float),
            dropped_columns=tuple(d.get("dropped_columns", ())),
            site=d.get("site"),
            subset_tag=None if tag is None else tuple(tag),
            n_columns=int(d["n_columns"]),
        )


def predict(model: FittedOutcomeModel, X) -> np.ndarray:
    return model.predict(X)


def retained_columns(design: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Indices of a maximal linearly independent column subset (pivoted QR)."""
    if design.shape[1] == 0:
        return np.arange(0)
    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        return np.arange(0)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(piv[:rank])


def fit_wls(design, y, weights, basis: BasisSpec | None = None, site=None, subset_tag=None) -> FittedOutcomeModel:
    """Weighted least squares with collinear columns dropped."""
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if design.ndim != 2 or design.shape[0] != y.shape[0] or w.shape[0] != y.shape[0]:
        raise DimensionMismatch("design, outcome and weights must share the row count")
    if np.isnan(design).any() or np.isnan(y).any():
        raise MissingValues("missing values in design or outcome")
    if not (np.all(np.isfinite(w)) and np.all(w >= 0) and np.any(w > 0)):
        raise ValueError("weights must be finite, nonnegative and not all zero")
    sw = np.sqrt(w)
    wd = design * sw[:, None]
    keep = retained_columns(wd)
    if keep.size == 0 or int(np.sum(w > 0)) < keep.size:
        raise DegenerateFeatures(f"{int(np.sum(w > 0))} weighted rows cannot fit {keep.size} columns")
    coef, *_ = np.linalg.lstsq(wd[:, keep], sw * y, rcond=None)
    dropped = tuple(int(c) for c in np.setdiff1d(np.arange(design.shape[1]), keep))
    return FittedOutcomeModel(basis, coef, dropped, site, subset_tag, design.shape[1])


def fit_ols(design, y, basis: BasisSpec | None = None, site=None) -> FittedOutcomeModel:
    y = np.asarray(y, dtype=float).ravel()
    return fit_wls(design, y, np.ones(y.shape[0]), basis=basis, site=site)


def fit_outcome(X, y, spec: BasisSpec, site=None, weights=None, subset_tag=None) -> FittedOutcomeModel:
    """Resolve ``spec`` on local data, expand and fit by (weighted) least squares."""
    spec = resolve_basis(spec, X)
    design = expand_basis(X, spec)
    y = np.asarray(y, dtype=float).ravel()
    w = np.ones(y.shape[0]) if weights is None else weights
    return fit_wls(design, y, w, basis=spec, site=site, subset_tag=subset_tag)
