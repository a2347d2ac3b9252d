"""Entropy-balancing calibration weights.

Given the calibrated features g(X) observed at a source site and the mean of
the same features at a target site, find positive weights on the source rows
whose weighted feature mean equals the target mean while staying as close to
uniform as possible in Kullback-Leibler divergence. The solution is an
exponential tilt ``w_i ∝ exp(gamma' g(X_i))``; gamma is found by minimizing the
convex dual ``log sum_i exp(gamma'(g_i - target))`` with Newton's method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .errors import (
    DegenerateFeatures,
    DidNotConverge,
    Diverged,
    DimensionMismatch,
    InfeasibleTarget,
)
from .numlin import NewtonConfig, as_matrix, dsum, dsum_rows, newton_minimize

RANK_TOL = 1e-8
BALANCE_TOL = 1e-8


@dataclass(frozen=True)
class CalibrationProblem:
    features: np.ndarray
    target_mean: np.ndarray
    source_site: object = None
    target_site: object = None

    def __post_init__(self):
        feats = as_matrix(self.features, "features")
        target = np.asarray(self.target_mean, dtype=float).ravel()
        if target.shape[0] != feats.shape[1]:
            raise DimensionMismatch(
                f"target mean has {target.shape[0]} entries, features have {feats.shape[1]} columns"
            )
        if not np.all(np.isfinite(target)):
            raise ValueError("target mean has non-finite entries")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "target_mean", target)


@dataclass(frozen=True)
class CalibrationResult:
    gamma: np.ndarray
    weights: np.ndarray
    balance_residual: np.ndarray
    iterations: int
    effective_sample_size: float
    dropped_columns: tuple = ()
    source_site: object = None
    target_site: object = None
    objective_trace: list = field(default_factory=list, repr=False, compare=False)

    def scaled(self, n_target: int) -> np.ndarray:
        """Weights rescaled to sum to the target sample size."""
        return self.weights * float(n_target)


def uniform_result(n: int, p: int, site=None) -> CalibrationResult:
    """Self-calibration: uniform weights and a zero multiplier."""
    w = np.full(n, 1.0 / n)
    return CalibrationResult(
        gamma=np.zeros(p),
        weights=w,
        balance_residual=np.zeros(p),
        iterations=0,
        effective_sample_size=float(n),
        source_site=site,
        target_site=site,
    )


def _retained_columns(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick a linearly independent subset of (centered) feature columns."""
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    nonconst = np.flatnonzero(sd > 1e-12 * np.maximum(1.0, np.abs(mu)))
    if nonconst.size == 0:
        return nonconst, mu, sd
    z = (feats[:, nonconst] - mu[nonconst]) / sd[nonconst]
    _, r, piv = scipy.linalg.qr(z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    return np.sort(nonconst[piv[:rank]]), mu, sd


def entropy_balance(problem: CalibrationProblem, cfg: NewtonConfig = NewtonConfig()) -> CalibrationResult:
    """Solve the entropy-balancing problem for one (source, target) pair.

    Raises:
      InfeasibleTarget: the target mean cannot be reached by positive weights.
      DegenerateFeatures: fewer rows than features plus one.
    """
    feats, target = problem.features, problem.target_mean
    n, p = feats.shape
    src, tgt = problem.source_site, problem.target_site
    if n < p + 1:
        raise DegenerateFeatures(f"site {src}: {n} rows cannot calibrate {p} features")

    keep, mu, sd = _retained_columns(feats)
    dropped = tuple(int(c) for c in np.setdiff1d(np.arange(p), keep))
    gamma = np.zeros(p)
    trace: list = []
    iterations = 0
    at_mean = keep.size == 0 or np.max(np.abs(mu - target)[keep]) <= 1e-12
    if not at_mean:
        zc = (feats[:, keep] - target[keep]) / sd[keep]

        def fun(g):
            return float(logsumexp(zc @ g))

        def grad(g):
            u = zc @ g
            pr = np.exp(u - logsumexp(u))
            return zc.T @ pr

        def hess(g):
            u = zc @ g
            pr = np.exp(u - logsumexp(u))
            m = zc.T @ pr
            h = (zc * pr[:, None]).T @ zc - np.outer(m, m)
            return 0.5 * (h + h.T)

        try:
            res = newton_minimize(fun, grad, hess, np.zeros(keep.size), cfg)
        except (Diverged, DidNotConverge) as exc:
            raise InfeasibleTarget(
                f"calibration of site {src} toward site {tgt} failed: {exc}", source=src, target=tgt
            ) from exc
        gamma[keep] = res.x / sd[keep]
        iterations, trace = res.iterations, res.objective_trace
        u = zc @ res.x
        e = np.exp(u - u.max())
    else:
        e = np.ones(n)
    weights = e / dsum(e)
    if not np.all(weights > 0):
        raise InfeasibleTarget(
            f"calibration of site {src} toward site {tgt} underflows some weights", source=src, target=tgt
        )
    resid = balance_residual(weights, feats, target)
    tol = BALANCE_TOL * max(1.0, float(np.max(np.abs(target), initial=0.0)))
    if np.max(np.abs(resid), initial=0.0) > tol:
        # only reachable through dropped columns the target does not respect
        raise InfeasibleTarget(
            f"site {src} cannot match site {tgt}: residual {np.max(np.abs(resid)):.3e} on collinear features",
            source=src,
            target=tgt,
        )
    ess = 1.0 / dsum(weights * weights)
    return CalibrationResult(
        gamma=gamma,
        weights=weights,
        balance_residual=resid,
        iterations=iterations,
        effective_sample_size=ess,
        dropped_columns=dropped,
        source_site=src,
        target_site=tgt,
        objective_trace=trace,
    )


def balance_residual(weights, features, target_mean) -> np.ndarray:
    """Weighted feature mean minus the target mean, per coordinate."""
    w = np.asarray(weights, dtype=float).ravel()
    feats = as_matrix(features, "features")
    target = np.asarray(target_mean, dtype=float).ravel()
    if w.shape[0] != feats.shape[0] or target.shape[0] != feats.shape[1]:
        raise DimensionMismatch(
            f"weights {w.shape[0]}, features {feats.shape}, target {target.shape[0]} do not agree"
        )
    if abs(dsum(w) - 1.0) > 1e-10:
        raise ValueError("weights must sum to 1")
    return dsum_rows(feats * w[:, None]) - target
