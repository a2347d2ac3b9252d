"""Simulation scenarios: covariates, site membership and outcomes for four sites.

Site membership follows a multinomial logit in either the covariates
(``"linear"`` strategy, coefficients ``zeta``) or their squares
(``"quadratic"``, coefficients ``nu``); the outcome mean is linear in the
covariates (``theta``) or in their squares (``psi``).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from ..data import SiteDataset

# rows are sites 1..4; membership tables have a leading intercept column
ZETA = ((0.0, 0.2, -0.2, -0.1), (0.0, 0.36, -0.28, -0.16), (0.0, 0.5, -0.4, -0.2), (0.0, 0.65, -0.5, -0.25))
NU = ((-0.4, 1.6, 1.0, 0.25), (-0.3, 1.4, 0.7, 0.5), (-0.5, 1.55, 1.1, 0.3), (-0.1, 1.5, 0.6, 0.4))
THETA = ((1.0, 0.3, 0.2, 0.2), (4.0, 0.5, 0.5, 0.6), (7.0, 0.7, 0.8, 1.0), (10.0, 0.9, 1.1, 1.5))
PSI = ((-0.5, -1.0, -1.0, -0.5), (0.2, 0.5, 1.0, 0.5), (1.5, 1.0, 2.0, 1.0), (3.0, 1.5, 2.5, 2.0))

# scenario -> (membership strategy, outcome strategy)
SCENARIOS = {
    "i": ("linear", "linear"),
    "ii": ("linear", "quadratic"),
    "iii": ("quadratic", "linear"),
    "iv": ("quadratic", "quadratic"),
}

NOISE_SCALE = 0.04  # conditional variance is NOISE_SCALE * |X2| ** NOISE_POWER
NOISE_POWER = 0.4


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "i"
    N: int = 2400
    K: int = 4
    zeta: tuple = ZETA
    nu: tuple = NU
    theta: tuple = THETA
    psi: tuple = PSI
    mean: tuple = (0.6, 0.6, 0.6)
    variances: tuple = (0.64, 1.0, 1.44)
    correlations: tuple = (0.001, 0.0, 0.001)  # (rho12, rho13, rho23)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {sorted(SCENARIOS)}")
        if self.N < 100:
            raise ValueError("N must be at least 100")
        for name in ("zeta", "nu", "theta", "psi"):
            tab = tuple(tuple(float(v) for v in row) for row in getattr(self, name))
            if len(tab) != self.K or any(len(r) != 4 for r in tab):
                raise ValueError(f"{name} must have {self.K} rows of 4 coefficients")
            object.__setattr__(self, name, tab)
        for name in ("mean", "variances", "correlations"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def membership(self) -> str:
        return SCENARIOS[self.scenario][0]

    @property
    def outcome(self) -> str:
        return SCENARIOS[self.scenario][1]

    @property
    def covariance(self) -> np.ndarray:
        sd = np.sqrt(self.variances)
        r12, r13, r23 = self.correlations
        corr = np.array([[1.0, r12, r13], [r12, 1.0, r23], [r13, r23, 1.0]])
        return corr * np.outer(sd, sd)

    def population_hash(self) -> str:
        """Hash of everything that defines the population (not N)."""
        d = asdict(self)
        d.pop("N")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(**d)


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based generator for one seed; replicate r of a study uses seed + r."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def draw_covariates(spec: ScenarioSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    L = np.linalg.cholesky(spec.covariance)
    return np.asarray(spec.mean) + rng.standard_normal((n, 3)) @ L.T


def membership_logits(spec: ScenarioSpec, X: np.ndarray) -> np.ndarray:
    if spec.membership == "linear":
        coef, feats = np.asarray(spec.zeta), X
    else:
        coef, feats = np.asarray(spec.nu), X**2
    return coef[:, 0] + feats @ coef[:, 1:].T


def membership_probs(spec: ScenarioSpec, X: np.ndarray) -> np.ndarray:
    return softmax(membership_logits(spec, X), axis=1)


def outcome_means(spec: ScenarioSpec, X: np.ndarray) -> np.ndarray:
    """n x K matrix of E[Y | X, D = k]."""
    if spec.outcome == "linear":
        coef, feats = np.asarray(spec.theta), X
    else:
        coef, feats = np.asarray(spec.psi), X**2
    return coef[:, 0] + feats @ coef[:, 1:].T


def gen_scenario(spec: ScenarioSpec, seed: int) -> list:
    """Draw one data set of ``spec.N`` subjects split into K SiteDatasets."""
    rng = rng_for(seed)
    X = draw_covariates(spec, rng, spec.N)
    probs = membership_probs(spec, X)
    u = rng.random(spec.N)
    D = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), spec.K - 1)
    mu = outcome_means(spec, X)[np.arange(spec.N), D]
    sd = np.sqrt(NOISE_SCALE * np.abs(X[:, 1]) ** NOISE_POWER)
    Y = mu + sd * rng.standard_normal(spec.N)
    return [SiteDataset(k + 1, Y[D == k], X[D == k]) for k in range(spec.K)]


_TRUTH_CACHE: dict = {}


def _truth_path(cache_dir, key: str) -> Path | None:
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("FEDCMP_CACHE_DIR")
    return None if not cache_dir else Path(cache_dir) / f"truth-{key}.json"


def true_value(spec: ScenarioSpec, subset, k: int, kp: int, draws: int = 10**7, seed: int = 0,
               chunk: int = 10**6, cache_dir=None) -> tuple[float, float]:
    """Monte Carlo value and standard error of the effect of k' versus k over ``subset``.

    Site membership and outcome noise are integrated out analytically: each
    covariate draw contributes its treatment-mean difference weighted by its
    probability of belonging to the subset.
    """
    subset = tuple(sorted(int(s) for s in subset))
    if draws < 10**6:
        raise ValueError("the truth oracle needs at least 1e6 draws")
    if k == kp:
        return 0.0, 0.0
    key = hashlib.sha256(
        json.dumps([spec.population_hash(), subset, k, kp, int(draws), int(seed)]).encode()
    ).hexdigest()[:20]
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]
    path = _truth_path(cache_dir, key)
    if path is not None and path.exists():
        v = tuple(json.loads(path.read_text()))
        _TRUTH_CACHE[key] = v
        return v
    rng = rng_for(seed)
    idx = [s - 1 for s in subset]
    sw = swd = sw2 = swd2 = sww = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        X = draw_covariates(spec, rng, m)
        logits = membership_logits(spec, X)
        w = np.exp(logsumexp(logits[:, idx], axis=1) - logsumexp(logits, axis=1))
        mu = outcome_means(spec, X)
        d = mu[:, kp - 1] - mu[:, k - 1]
        sw += float(np.sum(w))
        swd += float(np.sum(w * d))
        sw2 += float(np.sum(w * w))
        swd2 += float(np.sum((w * d) ** 2))
        sww += float(np.sum(w * w * d))
        done += m
    value = swd / sw
    # delta-method standard error of the ratio of means
    var_num = swd2 / draws - (swd / draws) ** 2
    var_den = sw2 / draws - (sw / draws) ** 2
    cov = sww / draws - (swd / draws) * (sw / draws)
    mden = sw / draws
    se = float(np.sqrt(max(var_num - 2 * value * cov + value**2 * var_den, 0.0) / draws) / mden)
    out = (float(value), se)
    _TRUTH_CACHE[key] = out
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(list(out)))
    return out


def true_value_oracle(spec: ScenarioSpec, subset, k: int, kp: int, draws: int = 10**7, **kw) -> float:
    return true_value(spec, subset, k, kp, draws, **kw)[0]
