"""Dense linear algebra helpers and a damped Newton minimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import DidNotConverge, Diverged, DimensionMismatch, SingularSystem

_EPS = np.finfo(float).eps


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float array, raising on anything else."""
    m = np.asarray(a, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def dsum(x) -> float:
    """Order-independent, correctly rounded sum of a 1-D array."""
    return math.fsum(np.asarray(x, dtype=float).ravel().tolist())


def dsum_rows(m) -> np.ndarray:
    """Column sums of a 2-D array, each correctly rounded."""
    m = np.asarray(m, dtype=float)
    return np.array([math.fsum(col) for col in m.T.tolist()])


def dgram(m, w=None) -> np.ndarray:
    """Correctly rounded ``sum_i w_i m_i m_i^T`` (symmetric by construction)."""
    m = np.asarray(m, dtype=float)
    p = m.shape[1]
    out = np.empty((p, p))
    wm = m if w is None else m * np.asarray(w, dtype=float)[:, None]
    for a in range(p):
        for b in range(a, p):
            out[a, b] = out[b, a] = math.fsum((wm[:, a] * m[:, b]).tolist())
    return out


def solve_spd(a, b, ridge: float = 1e-10) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    Uses a Cholesky factorization. If that fails, ``ridge`` times the largest
    diagonal entry is added to the diagonal and the factorization retried once.
    """
    a = as_matrix(a, "A")
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionMismatch(f"A must be square, got {a.shape}")
    if b.shape[0] != n:
        raise DimensionMismatch(f"b has length {b.shape[0]}, A has {n} rows")
    scale = max(1.0, float(np.max(np.abs(a)))) if n else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * scale:
        raise DimensionMismatch("A is not symmetric")
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a), b)
    except np.linalg.LinAlgError:
        pass
    bump = ridge * max(1.0, float(np.max(np.diag(a)))) if n else ridge
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a + bump * np.eye(n)), b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"factorization failed after ridge {bump:g}") from exc


@dataclass(frozen=True)
class NewtonConfig:
    gradient_tolerance: float = 1e-10
    max_iterations: int = 100
    ridge: float = 1e-10
    backtracking_shrink: float = 0.5
    armijo_constant: float = 1e-4
    divergence_bound: float = 1e3

    def __post_init__(self):
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if not 0 < self.backtracking_shrink < 1:
            raise ValueError("backtracking_shrink must lie in (0, 1)")
        if not 0 < self.armijo_constant < 1:
            raise ValueError("armijo_constant must lie in (0, 1)")


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    gradient_norm: float
    objective_trace: list = field(default_factory=list)


def newton_minimize(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    hess: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    cfg: NewtonConfig = NewtonConfig(),
) -> NewtonResult:
    """Minimize a smooth convex function by Newton's method with Armijo backtracking.

    Stops once the gradient's infinity norm is at most
    ``cfg.gradient_tolerance``. Raises :class:`Diverged` when an iterate leaves
    the box ``|x|_inf <= cfg.divergence_bound`` and :class:`DidNotConverge`
    when the iteration budget runs out or the line search stalls.
    """
    x = np.array(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 has non-finite entries")
    f = float(fun(x))
    trace = [f]
    for it in range(cfg.max_iterations + 1):
        g = np.asarray(grad(x), dtype=float)
        gnorm = float(np.max(np.abs(g), initial=0.0))
        if gnorm <= cfg.gradient_tolerance:
            return NewtonResult(x, it, gnorm, trace)
        if it == cfg.max_iterations:
            break
        try:
            step = -solve_spd(hess(x), g, ridge=cfg.ridge)
        except SingularSystem as exc:
            raise DidNotConverge(f"singular Hessian at iteration {it}") from exc
        slope = float(g @ step)
        if not slope < 0:
            # Hessian numerically indefinite; fall back to steepest descent
            step, slope = -g, -float(g @ g)
        t = 1.0
        # allowance for rounding in f once the true decrease is below eps*|f|
        slack = 16 * _EPS * max(1.0, abs(f))
        while True:
            cand = x + t * step
            f_new = float(fun(cand))
            if math.isfinite(f_new) and f_new <= f + cfg.armijo_constant * t * slope + slack:
                break
            t *= cfg.backtracking_shrink
            if t < 1e-20:
                raise DidNotConverge(f"line search stalled at iteration {it}")
        x, f = cand, f_new
        trace.append(f_new)
        if float(np.max(np.abs(x))) > cfg.divergence_bound:
            raise Diverged(f"iterate left the box |x| <= {cfg.divergence_bound:g} at iteration {it + 1}")
    raise DidNotConverge(
        f"gradient norm {gnorm:.3e} above {cfg.gradient_tolerance:g} after {cfg.max_iterations} iterations"
    )
