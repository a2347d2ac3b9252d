"""Bias-reduced DAC for log-linear weights and linear outcome models.

Nuisance parameters are chosen so the empirical derivative of the efficient
influence function vanishes. With a shared basis g(X) = a(X) containing an
intercept this reduces to entropy balancing for the weights and, for every
target subset, a weighted least-squares fit whose row weights are the summed
exponential tilts toward the subset's sites. The resulting estimator and its
variance are assembled from the O-moments below (sums over the sending site):

  O1          sum g
  O2[k, I]    sum tilt_k * r_I              (r_I = y - beta_I' g)
  O3          sum g g'
  O4[l, h, I] sum tilt_l * tilt_h * r_I^2
  O5[k, I]    sum tilt_k * r_I * g
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.optimize
from scipy.special import logsumexp

from .calib import CalibrationProblem, CalibrationResult, entropy_balance
from .dac import EstimateReport, _n_subset, all_subsets, as_subset, dor_sandwich_sumsq
from .data import CalibrationFeatures, SiteDataset
from .errors import DegenerateFeatures, InfeasibleTarget, MissingModel, SameComparators, UnknownSite
from .numlin import dgram, dsum, dsum_rows, solve_spd
from .outcome import fit_wls


def with_intercept(features: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((features.shape[0], 1)), features])


@dataclass(frozen=True)
class Target:
    """What site l knows about a calibration target j after round one."""

    n: int
    gbar: np.ndarray


@dataclass(frozen=True)
class BRNuisanceFit:
    site: int
    gammas: dict  # j -> full log-linear coefficients (intercept first)
    betas: dict  # subset -> outcome coefficients on g = (1, features)
    tilts: dict = field(repr=False)  # j -> exp(gamma_j' a(X_i)) over local rows
    calibrations: dict = field(default_factory=dict, repr=False)
    experimental: bool = False


def br_fit_site(
    data: SiteDataset,
    targets: Mapping[int, Target],
    features: CalibrationFeatures,
    subsets: Iterable | None = None,
    weight_features: CalibrationFeatures | None = None,
) -> BRNuisanceFit:
    """Solve the bias-reduced estimating equations at site ``data.site``.

    ``weight_features`` selects a(X) when it differs from g(X); that path solves
    the square nonlinear system directly and is experimental.
    """
    ell = data.site
    sites = sorted(targets)
    subsets = all_subsets(sites) if subsets is None else [as_subset(s) for s in subsets]
    if weight_features is not None and weight_features != features:
        return _br_fit_general(data, targets, features, weight_features, subsets)
    raw = features(data.X)
    G = with_intercept(raw)
    if data.n < G.shape[1]:
        raise DegenerateFeatures(f"site {ell}: {data.n} rows cannot fit {G.shape[1]} coefficients")
    gammas, tilts, cals = {}, {}, {}
    for j in sites:
        if j == ell:
            gammas[j] = np.zeros(G.shape[1])
            tilts[j] = np.ones(data.n)
            continue
        cr = entropy_balance(CalibrationProblem(raw, targets[j].gbar, ell, j))
        cals[j] = cr
        tilts[j] = float(targets[j].n) * cr.weights
        alpha = np.log(targets[j].n) - logsumexp(raw @ cr.gamma)
        gammas[j] = np.concatenate([[alpha], cr.gamma])
    betas = {}
    for subset in subsets:
        w = np.sum([tilts[j] for j in subset], axis=0)
        fit = fit_wls(G, data.y, w, site=ell, subset_tag=subset)
        beta = np.zeros(G.shape[1])
        beta[fit.retained_columns] = fit.coefficients
        betas[subset] = beta
    return BRNuisanceFit(ell, gammas, betas, tilts, cals)


def _br_fit_general(data, targets, g_map, a_map, subsets) -> BRNuisanceFit:
    ell = data.site
    G = with_intercept(g_map(data.X))
    A = with_intercept(a_map(data.X))
    if G.shape[1] != A.shape[1]:
        raise DegenerateFeatures("bias-reduced fitting needs as many weight as outcome basis functions")
    gammas, tilts = {}, {}
    for j in sorted(targets):
        if j == ell:
            gammas[j] = np.zeros(A.shape[1])
            tilts[j] = np.ones(data.n)
            continue
        goal = float(targets[j].n) * np.concatenate([[1.0], targets[j].gbar])

        def F(gm):
            return G.T @ np.exp(A @ gm) - goal

        def J(gm):
            return (G * np.exp(A @ gm)[:, None]).T @ A

        x0 = np.zeros(A.shape[1])
        x0[0] = np.log(targets[j].n / data.n)
        sol = scipy.optimize.root(F, x0, jac=J, method="hybr", options={"xtol": 1e-14})
        if not sol.success or np.max(np.abs(F(sol.x))) > 1e-8 * max(1.0, np.max(np.abs(goal))):
            raise InfeasibleTarget(f"site {ell} cannot match site {j}: {sol.message}", source=ell, target=j)
        gammas[j] = sol.x
        tilts[j] = np.exp(A @ sol.x)
    betas = {}
    for subset in subsets:
        w = np.sum([tilts[j] for j in subset], axis=0)
        lhs = (A * w[:, None]).T @ G
        try:
            betas[subset] = np.linalg.solve(lhs, (A * w[:, None]).T @ data.y)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFeatures(f"site {ell}: cross-moment matrix singular for subset {subset}") from exc
    return BRNuisanceFit(ell, gammas, betas, tilts, {}, experimental=True)


def estimating_equation_residuals(data: SiteDataset, fit: BRNuisanceFit, targets, features, n_total: int):
    """Scaled (1/N) residuals of both estimating equations at the fitted values.

    Returns ``(weight_residuals, outcome_residuals)`` keyed by target site and
    by subset respectively.
    """
    G = with_intercept(features(data.X))
    wres = {}
    for j, t in fit.tilts.items():
        goal = float(targets[j].n) * np.concatenate([[1.0], targets[j].gbar])
        wres[j] = (goal - dsum_rows(G * t[:, None])) / n_total
    ores = {}
    for subset, beta in fit.betas.items():
        w = np.sum([fit.tilts[j] for j in subset], axis=0)
        r = data.y - G @ beta
        ores[subset] = dsum_rows(G * (w * r)[:, None]) / n_total
    return wres, ores


@dataclass(frozen=True)
class LinearDOR:
    """Site-local ordinary least-squares moments for the DOR comparator."""

    beta: np.ndarray
    cross_moment: np.ndarray  # sum r g g'
    meat: np.ndarray  # sum r^2 g g'
    resid_basis: np.ndarray  # sum r g


@dataclass(frozen=True)
class BRAggregatedData:
    site: int
    n: int
    beta: dict  # subset -> coefficients
    O1: np.ndarray
    O2: dict  # (k, subset) -> float
    O3: np.ndarray
    O4: dict  # (l, h, subset) -> float
    O5: dict  # (k, subset) -> vector
    dor: LinearDOR | None = None


def br_aggregates(data: SiteDataset, fit: BRNuisanceFit, features: CalibrationFeatures) -> BRAggregatedData:
    """Condense site ``data.site`` rows into bias-reduced aggregated data."""
    G = with_intercept(features(data.X))
    y = data.y
    sites = sorted(fit.tilts)
    O2, O4, O5 = {}, {}, {}
    for subset, beta in fit.betas.items():
        r = y - G @ beta
        r2 = r * r
        for k in sites:
            tr = fit.tilts[k] * r
            O2[(k, subset)] = dsum(tr)
            O5[(k, subset)] = dsum_rows(G * tr[:, None])
        for l, h in itertools.combinations_with_replacement(sites, 2):
            O4[(l, h, subset)] = O4[(h, l, subset)] = dsum(fit.tilts[l] * fit.tilts[h] * r2)
    ols = fit_wls(G, y, np.ones(data.n))
    beta_ols = np.zeros(G.shape[1])
    beta_ols[ols.retained_columns] = ols.coefficients
    r = y - G @ beta_ols
    dor = LinearDOR(beta_ols, dgram(G, r), dgram(G, r * r), dsum_rows(G * r[:, None]))
    return BRAggregatedData(data.site, data.n, dict(fit.betas), dsum_rows(G), O2, dgram(G), O4, O5, dor)


def _index(brads) -> dict:
    if isinstance(brads, Mapping):
        return dict(brads)
    return {b.site: b for b in brads}


def _check(brads: dict, subset, k: int, kp: int) -> tuple:
    subset = as_subset(subset)
    if k == kp:
        raise SameComparators(f"comparators must differ, got ({k}, {kp})")
    for s in set(subset) | {k, kp}:
        if s not in brads:
            raise UnknownSite(f"no aggregated data for site {s}")
    for s in (k, kp):
        if subset not in brads[s].beta:
            raise UnknownSite(f"site {s} sent no fit for subset {subset}")
    return subset


def _vsum(vectors) -> np.ndarray:
    return dsum_rows(np.vstack(list(vectors)))


def br_mu(brads, subset, k: int) -> float:
    brads = _index(brads)
    subset = as_subset(subset)
    o1 = _vsum(brads[j].O1 for j in subset)
    terms = list(brads[k].beta[subset] * o1) + [brads[k].O2[(j, subset)] for j in subset]
    return dsum(terms) / _n_subset(brads, subset)


def br_tau(brads, subset, k: int, kp: int) -> EstimateReport:
    brads = _index(brads)
    subset = _check(brads, subset, k, kp)
    mu = {k: br_mu(brads, subset, k), kp: br_mu(brads, subset, kp)}
    return EstimateReport("DAC", k, kp, subset, mu[kp] - mu[k], None, mu)


def br_var(brads, subset, k: int, kp: int, tau_hat: float) -> float:
    """Variance of the bias-reduced estimate; valid if either working model is right."""
    brads = _index(brads)
    subset = _check(brads, subset, k, kp)
    n_i = _n_subset(brads, subset)
    t = float(tau_hat)
    d = brads[kp].beta[subset] - brads[k].beta[subset]
    o1 = _vsum(brads[l].O1 for l in subset)
    o3 = np.sum([brads[l].O3 for l in subset], axis=0)
    terms = list(-2.0 * t * d * o1)
    terms.append(n_i * t * t)
    if k in subset:
        terms += [2.0 * t * brads[k].O2[(l, subset)] for l in subset]
        terms += list(-2.0 * d * _vsum(brads[k].O5[(l, subset)] for l in subset))
    if kp in subset:
        terms += [-2.0 * t * brads[kp].O2[(l, subset)] for l in subset]
        terms += list(2.0 * d * _vsum(brads[kp].O5[(l, subset)] for l in subset))
    terms.append(float(d @ o3 @ d))
    terms += [brads[s].O4[(l, h, subset)] for s in (kp, k) for l in subset for h in subset]
    return dsum(terms) / (float(n_i) ** 2)


def br_estimate(brads, subset, k: int, kp: int) -> EstimateReport:
    point = br_tau(brads, subset, k, kp)
    var = br_var(brads, point.subset, k, kp, point.tau_hat)
    return EstimateReport("DAC", k, kp, point.subset, point.tau_hat, var, point.mu_hat)


def br_dor_estimate(brads, subset, k: int, kp: int) -> EstimateReport:
    """Outcome-regression comparator with ordinary least squares on the shared basis."""
    brads = _index(brads)
    subset = as_subset(subset)
    if k == kp:
        raise SameComparators(f"comparators must differ, got ({k}, {kp})")
    for s in set(subset) | {k, kp}:
        if s not in brads:
            raise UnknownSite(f"no aggregated data for site {s}")
    for s in (k, kp):
        if brads[s].dor is None:
            raise MissingModel(f"site {s} sent no least-squares moments")
    n_i = _n_subset(brads, subset)
    o1 = _vsum(brads[l].O1 for l in subset)
    bk, bkp = brads[k].dor.beta, brads[kp].dor.beta
    mu = {k: dsum(bk * o1) / n_i, kp: dsum(bkp * o1) / n_i}
    t = mu[kp] - mu[k]
    d = bkp - bk
    o3 = np.sum([brads[l].O3 for l in subset], axis=0)
    fit_part = dsum([float(d @ o3 @ d), n_i * t * t] + list(-2.0 * t * d * o1))
    coef, meat, rb, cross = {}, {}, {}, {}
    for s, other in ((k, kp), (kp, k)):
        m = brads[s].dor
        coef[s] = solve_spd(brads[s].O3, o1)
        meat[s], rb[s] = m.meat, m.resid_basis
        cross[s] = m.cross_moment @ (m.beta - brads[other].dor.beta)
    var = dor_sandwich_sumsq(fit_part, t, k, kp, subset, coef, meat, rb, cross) / float(n_i) ** 2
    return EstimateReport("DOR", k, kp, subset, t, var, mu)
