"""Distributed augmented calibration (DAC) estimators from aggregated data.

Each site j condenses its individual rows into an :class:`AggregatedData`
record; the coordinator assembles point estimates and influence-function
variances for every comparator pair (k, k') and target subset of sites
from those records alone. Two comparators share the machinery: the outcome
regression (DOR) estimator, which keeps only the model-mean part, and the
calibration-weighting (DCW) estimator, which keeps only weighted outcome
means.

Notation used in field names (all sums run over the rows of the sending site j):

  A1[k]       mean of model k's predictions
  A2[l]       weighted mean residual of site j's own model, weights toward target l
  A3[k, k']   sum of squared prediction differences between models k and k'
  A4[l, h]    sum of w_l * w_h * residual^2 (w scaled to target sizes)
  A5[k', l]   sum of w_l * (m_j - m_k') * residual
  B2[l]       weighted outcome mean toward target l
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Mapping

import numpy as np

from .calib import CalibrationResult, uniform_result
from .data import SiteDataset
from .errors import (
    DimensionMismatch,
    EmptySubset,
    MissingModel,
    MissingWeights,
    SameComparators,
    UnknownSite,
)
from .numlin import dgram, dsum, dsum_rows, solve_spd
from .outcome import FittedOutcomeModel

MAX_SITES = 12
Z_975 = NormalDist().inv_cdf(0.975)


def as_subset(subset: Iterable) -> tuple:
    s = tuple(sorted({int(v) for v in subset}))
    if not s:
        raise EmptySubset("target subset must be nonempty")
    return s


def all_subsets(sites: Iterable) -> list[tuple]:
    """All nonempty subsets of ``sites`` ordered by size, then lexicographically."""
    sites = sorted(sites)
    if len(sites) > MAX_SITES:
        raise ValueError(f"at most {MAX_SITES} sites are supported, got {len(sites)}")
    return [c for r in range(1, len(sites) + 1) for c in itertools.combinations(sites, r)]


def subset_label(subset: Iterable) -> str:
    return "+".join(str(s) for s in subset)


def parse_subset(label: str) -> tuple:
    return as_subset(int(v) for v in label.split("+"))


@dataclass(frozen=True)
class EstimateReport:
    method: str
    k: int
    k_prime: int
    subset: tuple
    tau_hat: float
    variance: float | None = None
    mu_hat: dict = field(default_factory=dict)

    @property
    def se(self) -> float | None:
        if self.variance is None:
            return None
        return math.sqrt(max(self.variance, 0.0))

    @property
    def ci_low(self) -> float | None:
        se = self.se
        return None if se is None else self.tau_hat - Z_975 * se

    @property
    def ci_high(self) -> float | None:
        se = self.se
        return None if se is None else self.tau_hat + Z_975 * se

    @property
    def p_value(self) -> float | None:
        se = self.se
        if se is None:
            return None
        if se == 0.0:
            return 1.0 if self.tau_hat == 0.0 else 0.0
        return math.erfc(abs(self.tau_hat) / se / math.sqrt(2.0))

    @property
    def key(self) -> tuple:
        return (self.method, self.k, self.k_prime, self.subset)


@dataclass(frozen=True)
class DORMoments:
    """Moments of site j's own least-squares fit, for the DOR sandwich variance.

    ``h_j`` is site j's retained outcome basis and ``r`` its residual.
    """

    basis_sums: dict  # k -> sum of h_k(X) over site j rows
    gram: np.ndarray  # sum h_j h_j'
    meat: np.ndarray  # sum r^2 h_j h_j'
    resid_basis: np.ndarray  # sum r h_j
    cross: dict  # k -> sum r (m_j - m_k) h_j


@dataclass(frozen=True)
class AggregatedData:
    site: int
    n: int
    A1: dict
    A2: dict
    A3: dict
    A4: dict
    A5: dict
    B2: dict
    dor: DORMoments | None = None


def site_aggregates(
    data: SiteDataset,
    models: Mapping[int, FittedOutcomeModel],
    weights: Mapping[int, CalibrationResult],
    sizes: Mapping[int, int],
) -> AggregatedData:
    """Build site j's aggregated data.

    Args:
      data: site j's rows.
      models: fitted outcome model of every site, keyed by site id.
      weights: calibration of site j's rows toward each target site l, keyed
        by l. The self entry may be omitted; it defaults to uniform weights.
      sizes: sample size of every site.
    """
    j = data.site
    sites = sorted(sizes)
    if j not in models:
        raise MissingModel(f"site {j} has no model of its own")
    for k in sites:
        if k not in models:
            raise MissingModel(f"no outcome model for site {k}")
    probs = {}
    for l in sites:
        cr = weights.get(l)
        if cr is None:
            if l != j:
                raise MissingWeights(f"site {j} has no calibration weights toward site {l}")
            cr = uniform_result(data.n, 0, j)
        w = np.asarray(cr.weights, dtype=float)
        if w.shape != (data.n,):
            raise MissingWeights(f"weights toward site {l} have {w.shape[0]} entries, site {j} has {data.n} rows")
        probs[l] = w
    X, y = data.X, data.y
    preds = {k: models[k].predict(X) for k in sites}
    own = preds[j]
    r = y - own
    tilt = {l: float(sizes[l]) * probs[l] for l in sites}  # w_{lj}(X_i)

    A1 = {k: dsum(preds[k]) / data.n for k in sites}
    A2 = {l: dsum(probs[l] * r) for l in sites}
    B2 = {l: dsum(probs[l] * y) for l in sites}
    A3 = {}
    for a, b in itertools.combinations_with_replacement(sites, 2):
        d = preds[a] - preds[b]
        A3[(a, b)] = A3[(b, a)] = dsum(d * d)
    r2 = r * r
    A4 = {}
    for l, h in itertools.combinations_with_replacement(sites, 2):
        A4[(l, h)] = A4[(h, l)] = dsum(tilt[l] * tilt[h] * r2)
    A5 = {}
    for kp in sites:
        dr = (own - preds[kp]) * r
        for l in sites:
            A5[(kp, l)] = dsum(tilt[l] * dr)

    H = models[j].design(X)
    dor = DORMoments(
        basis_sums={k: dsum_rows(models[k].design(X)) for k in sites},
        gram=dgram(H),
        meat=dgram(H, r2),
        resid_basis=dsum_rows(H * r[:, None]),
        cross={k: dsum_rows(H * (r * (own - preds[k]))[:, None]) for k in sites},
    )
    return AggregatedData(j, data.n, A1, A2, A3, A4, A5, B2, dor)


def _index(ads) -> dict:
    if isinstance(ads, Mapping):
        return dict(ads)
    return {ad.site: ad for ad in ads}


def _check(ads: dict, subset, k: int, kp: int) -> tuple:
    subset = as_subset(subset)
    if k == kp:
        raise SameComparators(f"comparators must differ, got ({k}, {kp})")
    for s in set(subset) | {k, kp}:
        if s not in ads:
            raise UnknownSite(f"no aggregated data for site {s}")
    return subset


def _n_subset(ads: dict, subset: tuple) -> int:
    return sum(ads[j].n for j in subset)


def dac_mu(ads, subset, k: int) -> float:
    """Augmented calibration estimate of the mean potential outcome under treatment k."""
    ads = _index(ads)
    subset = as_subset(subset)
    for s in set(subset) | {k}:
        if s not in ads:
            raise UnknownSite(f"no aggregated data for site {s}")
    terms = [ads[j].n * ads[j].A1[k] for j in subset] + [ads[j].n * ads[k].A2[j] for j in subset]
    return dsum(terms) / _n_subset(ads, subset)


def dac_tau(ads, subset, k: int, kp: int) -> EstimateReport:
    """Point estimate of the effect of k' versus k in the population of ``subset``."""
    ads = _index(ads)
    subset = _check(ads, subset, k, kp)
    mu = {k: dac_mu(ads, subset, k), kp: dac_mu(ads, subset, kp)}
    return EstimateReport("DAC", k, kp, subset, mu[kp] - mu[k], None, mu)


def dac_var(ads, subset, k: int, kp: int, tau_hat: float) -> float:
    """Influence-function variance of the DAC estimate, from aggregated data only."""
    ads = _index(ads)
    subset = _check(ads, subset, k, kp)
    n_i = _n_subset(ads, subset)
    t = float(tau_hat)
    terms = [ads[l].A3[(k, kp)] for l in subset]
    terms += [ads[kp].A4[(l, h)] for l in subset for h in subset]
    terms += [ads[k].A4[(l, h)] for l in subset for h in subset]
    if kp in subset:
        terms += [2.0 * ads[kp].A5[(k, l)] for l in subset]
        terms += [-2.0 * t * ads[l].n * ads[kp].A2[l] for l in subset]
    if k in subset:
        terms += [2.0 * ads[k].A5[(kp, l)] for l in subset]
        terms += [2.0 * t * ads[l].n * ads[k].A2[l] for l in subset]
    terms += [-2.0 * t * ads[l].n * (ads[l].A1[kp] - ads[l].A1[k]) for l in subset]
    terms.append(n_i * t * t)
    return dsum(terms) / (float(n_i) ** 2)


def dac_estimate(ads, subset, k: int, kp: int) -> EstimateReport:
    point = dac_tau(ads, subset, k, kp)
    var = dac_var(ads, point.subset, k, kp, point.tau_hat)
    return EstimateReport("DAC", k, kp, point.subset, point.tau_hat, var, point.mu_hat)


def dor_mu(ads, subset, k: int) -> float:
    ads = _index(ads)
    subset = as_subset(subset)
    return dsum([ads[j].n * ads[j].A1[k] for j in subset]) / _n_subset(ads, subset)


def dor_tau(ads, subset, k: int, kp: int) -> EstimateReport:
    """Outcome-regression comparator: model means only, no residual correction."""
    ads = _index(ads)
    subset = _check(ads, subset, k, kp)
    mu = {k: dor_mu(ads, subset, k), kp: dor_mu(ads, subset, kp)}
    return EstimateReport("DOR", k, kp, subset, mu[kp] - mu[k], None, mu)


def dor_sandwich_sumsq(
    fit_part: float,
    tau: float,
    k: int,
    kp: int,
    subset: tuple,
    coef: Mapping[int, np.ndarray],
    meat: Mapping[int, np.ndarray],
    resid_basis: Mapping[int, np.ndarray],
    cross: Mapping[int, np.ndarray],
) -> float:
    """Sum of squared DOR influence values given the least-squares pieces.

    ``fit_part`` is the sum over target rows of (m_k' - m_k - tau)^2;
    ``coef[l]`` maps site l's basis to its implied regression weights and
    ``cross[l]`` is sum over site l of r (m_l - m_other) h_l.
    """
    terms = [fit_part]
    for s in (k, kp):
        terms.append(float(coef[s] @ meat[s] @ coef[s]))
    if kp in subset:
        terms += [2.0 * dsum(cross[kp] * coef[kp]), -2.0 * tau * dsum(resid_basis[kp] * coef[kp])]
    if k in subset:
        terms += [2.0 * dsum(cross[k] * coef[k]), 2.0 * tau * dsum(resid_basis[k] * coef[k])]
    return dsum(terms)


def dor_var(ads, subset, k: int, kp: int, tau_hat: float) -> float:
    """Sandwich variance of the DOR estimate for least-squares outcome models.

    The least-squares fit makes DOR a weighting estimator whose implied row
    weights at site l are ``c_l' h_l(X)`` with ``c_l`` solving
    ``gram_l c_l = sum over target rows of h_l(X)``; the variance then has the
    same structure as the DAC one with these weights.
    """
    ads = _index(ads)
    subset = _check(ads, subset, k, kp)
    for s in (k, kp):
        if ads[s].dor is None:
            raise MissingModel(f"site {s} sent no least-squares moments")
    n_i = _n_subset(ads, subset)
    t = float(tau_hat)
    fit_terms = [ads[l].A3[(k, kp)] for l in subset]
    fit_terms += [-2.0 * t * ads[l].n * (ads[l].A1[kp] - ads[l].A1[k]) for l in subset]
    fit_terms.append(n_i * t * t)
    coef, meat, rb, cross = {}, {}, {}, {}
    for s, other in ((k, kp), (kp, k)):
        m = ads[s].dor
        target_sum = np.array([dsum(col) for col in zip(*(ads[j].dor.basis_sums[s] for j in subset))])
        coef[s] = solve_spd(m.gram, target_sum)
        meat[s], rb[s], cross[s] = m.meat, m.resid_basis, m.cross[other]
    total = dor_sandwich_sumsq(dsum(fit_terms), t, k, kp, subset, coef, meat, rb, cross)
    return total / (float(n_i) ** 2)


def dor_estimate(ads, subset, k: int, kp: int) -> EstimateReport:
    point = dor_tau(ads, subset, k, kp)
    var = dor_var(ads, point.subset, k, kp, point.tau_hat)
    return EstimateReport("DOR", k, kp, point.subset, point.tau_hat, var, point.mu_hat)


def dcw_mu(ads, subset, k: int) -> float:
    ads = _index(ads)
    subset = as_subset(subset)
    return dsum([ads[j].n * ads[k].B2[j] for j in subset]) / _n_subset(ads, subset)


def dcw_tau(ads, subset, k: int, kp: int) -> EstimateReport:
    """Calibration-weighting comparator: weighted outcome means only (point estimate)."""
    ads = _index(ads)
    subset = _check(ads, subset, k, kp)
    mu = {k: dcw_mu(ads, subset, k), kp: dcw_mu(ads, subset, kp)}
    return EstimateReport("DCW", k, kp, subset, mu[kp] - mu[k], None, mu)


def bias_correction(ads, subset, k: int) -> float:
    """DAC minus DCW for the mean under treatment k (outcome-model balance gap)."""
    return dac_mu(ads, subset, k) - dcw_mu(ads, subset, k)


# Pooled-data reference -------------------------------------------------------


@dataclass(frozen=True)
class PooledEstimate:
    tau: float
    variance: float
    mu: dict


def pooled_oracle(
    sites: Mapping[int, SiteDataset],
    models: Mapping[int, FittedOutcomeModel],
    weights: Mapping[tuple, CalibrationResult],
    subset,
    k: int,
    kp: int,
) -> PooledEstimate:
    """Augmented calibration estimate computed on pooled individual rows.

    Only usable where all rows are visible (tests, simulations). ``weights``
    is keyed by (target l, source s); missing self entries mean uniform.
    The variance is the sample second moment of the estimated efficient
    influence function divided by N.
    """
    subset = as_subset(subset)
    if k == kp:
        raise SameComparators(f"comparators must differ, got ({k}, {kp})")
    sizes = {s: ds.n for s, ds in sites.items()}
    n_i = sum(sizes[j] for j in subset)
    D = np.concatenate([np.full(ds.n, s) for s, ds in sites.items()])
    X = np.vstack([ds.X for ds in sites.values()])
    Y = np.concatenate([ds.y for ds in sites.values()])
    in_target = np.isin(D, subset)

    def total_weight(s: int) -> np.ndarray:
        # sum over targets of w_{l s}(X_i), laid out over pooled rows (zero off site s)
        out = np.zeros(D.shape[0])
        rows = D == s
        for l in subset:
            if (l, s) in weights:
                p = weights[(l, s)].weights
            elif l == s:
                p = np.full(sizes[s], 1.0 / sizes[s])
            else:
                raise MissingWeights(f"no weights of site {s} toward {l}")
            if p.shape[0] != sizes[s]:
                raise DimensionMismatch("weights do not match site size")
            out[rows] += sizes[l] * p
        return out

    m = {s: models[s].predict(X) for s in (k, kp)}
    W = {s: total_weight(s) for s in (k, kp)}
    mu = {}
    for s in (k, kp):
        contrib = m[s] * in_target + (D == s) * (Y - m[s]) * W[s]
        mu[s] = float(np.sum(contrib)) / n_i
    tau = mu[kp] - mu[k]
    psi = (
        in_target * (m[kp] - m[k] - tau)
        + (D == kp) * (Y - m[kp]) * W[kp]
        - (D == k) * (Y - m[k]) * W[k]
    )
    return PooledEstimate(tau, float(np.sum(psi * psi)) / n_i**2, mu)
