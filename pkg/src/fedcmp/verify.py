"""Random-instance check that aggregated estimates reproduce pooled-row ones."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .calib import CalibrationProblem, balance_residual, entropy_balance
from .dac import all_subsets, dac_estimate, pooled_oracle, site_aggregates
from .data import CalibrationFeatures, SiteDataset
from .outcome import BasisSpec, fit_outcome


@dataclass(frozen=True)
class LosslessInstance:
    sites: dict
    models: dict
    weights: dict  # (target l, source s) -> CalibrationResult
    features: CalibrationFeatures


@dataclass(frozen=True)
class InstanceCheck:
    tau_rel: float
    var_rel: float
    balance_residual: float
    min_weight: float
    comparisons: int


@dataclass(frozen=True)
class LosslessSummary:
    instances: int
    passed: int
    tol: float
    max_tau_rel: float
    max_var_rel: float
    max_balance_residual: float
    min_weight: float

    @property
    def ok(self) -> bool:
        return self.passed == self.instances

    def line(self) -> str:
        return f"{self.passed}/{self.instances} within {self.tol:g}"


def random_instance(rng: np.random.Generator, K: int | None = None) -> LosslessInstance:
    """K in {2,3,4} sites of 40-200 rows with shifted covariates and mixed model bases."""
    K = int(rng.integers(2, 5)) if K is None else K
    p = int(rng.integers(1, 4))
    slope = rng.normal(size=p)
    sites = {}
    for s in range(1, K + 1):
        n = int(rng.integers(40, 201))
        X = rng.normal(0.1 * s * rng.uniform(-1, 1, size=p), rng.uniform(0.8, 1.2, size=p), size=(n, p))
        y = 2.0 * s + X @ slope + 0.4 * np.sin(2 * X[:, 0]) + rng.normal(scale=0.5, size=n)
        sites[s] = SiteDataset(s, y, X)
    models = {}
    for s, d in sites.items():
        spec = BasisSpec("cubic-spline", (int(rng.integers(1, 4)),)) if rng.random() < 0.5 else BasisSpec("linear")
        models[s] = fit_outcome(d.X, d.y, spec, site=s)
    feats = CalibrationFeatures()
    gbar = {s: feats.mean(d.X) for s, d in sites.items()}
    weights = {}
    for s, d in sites.items():
        for l in sites:
            if l != s:
                weights[(l, s)] = entropy_balance(CalibrationProblem(feats(d.X), gbar[l], s, l))
    return LosslessInstance(sites, models, weights, feats)


def check_instance(inst: LosslessInstance) -> InstanceCheck:
    """Worst relative gaps between aggregated and pooled estimates over all pairs and subsets."""
    sites = inst.sites
    sizes = {s: d.n for s, d in sites.items()}
    ads = {
        s: site_aggregates(d, inst.models, {l: inst.weights[(l, s)] for l in sites if l != s}, sizes)
        for s, d in sites.items()
    }
    tau_rel = var_rel = 0.0
    count = 0
    for subset in all_subsets(sites):
        for k, kp in itertools.permutations(sites, 2):
            est = dac_estimate(ads, subset, k, kp)
            ref = pooled_oracle(sites, inst.models, inst.weights, subset, k, kp)
            tau_rel = max(tau_rel, abs(est.tau_hat - ref.tau) / abs(ref.tau))
            var_rel = max(var_rel, abs(est.variance - ref.variance) / ref.variance)
            count += 1
    resid, wmin = 0.0, np.inf
    for (l, s), cr in inst.weights.items():
        target = inst.features.mean(sites[l].X)
        r = balance_residual(cr.weights, inst.features(sites[s].X), target)
        resid = max(resid, float(np.max(np.abs(r))))
        wmin = min(wmin, float(np.min(cr.weights)))
    return InstanceCheck(tau_rel, var_rel, resid, wmin, count)


def verify_lossless(instances: int = 100, seed: int = 7, tol: float = 1e-10) -> LosslessSummary:
    rng = np.random.default_rng(seed)
    passed = 0
    worst_tau = worst_var = worst_res = 0.0
    wmin = np.inf
    for _ in range(instances):
        chk = check_instance(random_instance(rng))
        passed += int(chk.tau_rel <= tol and chk.var_rel <= tol)
        worst_tau, worst_var = max(worst_tau, chk.tau_rel), max(worst_var, chk.var_rel)
        worst_res, wmin = max(worst_res, chk.balance_residual), min(wmin, chk.min_weight)
    return LosslessSummary(instances, passed, tol, worst_tau, worst_var, worst_res, float(wmin))
