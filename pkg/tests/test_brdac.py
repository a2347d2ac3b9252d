import itertools

import numpy as np
import pytest

from conftest import aggregates, constant_toy, make_sites, probs_of
from fedcmp.brdac import (
    Target,
    br_aggregates,
    br_dor_estimate,
    br_estimate,
    br_fit_site,
    br_tau,
    br_var,
    estimating_equation_residuals,
)
from fedcmp.dac import all_subsets, dac_tau, dcw_tau
from fedcmp.data import CalibrationFeatures, SiteDataset
from fedcmp.errors import InfeasibleTarget
from fedcmp.outcome import BasisSpec, FittedOutcomeModel, fit_outcome
from oracles import loop_br_aggregates, loop_dor, loop_pooled_eif, normal_equations

FEATS = CalibrationFeatures()


def br_setup(sites, feats=FEATS):
    targets = {s: Target(d.n, feats.mean(d.X)) for s, d in sites.items()}
    fits = {s: br_fit_site(d, targets, feats) for s, d in sites.items()}
    brads = {s: br_aggregates(d, fits[s], feats) for s, d in sites.items()}
    return targets, fits, brads


@pytest.fixture(scope="module")
def br3():
    sites = make_sites(31, K=3)
    return (sites, *br_setup(sites))


def nuisance_models(sites, fits, subset):
    basis = BasisSpec("linear", n_covariates=sites[1].p)
    models = {s: FittedOutcomeModel(basis, fits[s].betas[subset], site=s) for s in sites}
    weights = {(l, s): fits[s].calibrations[l] for s in sites for l in sites if l != s}
    return models, weights


def test_identical_sites_reduce_to_ols():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 2))
    y = X @ [1.0, 0.5] + rng.normal(size=50)
    sites = {1: SiteDataset(1, y, X), 2: SiteDataset(2, y + 1.0, X)}
    targets, fits, _ = br_setup(sites)
    np.testing.assert_allclose(fits[1].tilts[2], 1.0, atol=1e-12)
    G = np.hstack([np.ones((50, 1)), sites[1].X])
    np.testing.assert_allclose(fits[1].betas[(1,)], normal_equations(G, sites[1].y), atol=1e-10)
    np.testing.assert_array_equal(fits[1].gammas[1], 0.0)


def test_estimating_equation_residuals(br3):
    sites, targets, fits, _ = br3
    N = sum(d.n for d in sites.values())
    for s, d in sites.items():
        wres, ores = estimating_equation_residuals(d, fits[s], targets, FEATS, N)
        assert max(np.max(np.abs(v)) for v in wres.values()) <= 1e-8
        assert max(np.max(np.abs(v)) for v in ores.values()) <= 1e-8


def test_tilts_have_log_linear_form(br3):
    sites, targets, fits, _ = br3
    for s, d in sites.items():
        G = np.hstack([np.ones((d.n, 1)), FEATS(d.X)])
        for j, gam in fits[s].gammas.items():
            np.testing.assert_allclose(fits[s].tilts[j], np.exp(G @ gam), rtol=1e-12)
            # intercept row of the balance equation: tilts sum to the target size
            assert np.sum(fits[s].tilts[j]) == pytest.approx(targets[j].n, rel=1e-12)


def test_infeasible_target_names_site():
    sites = make_sites(32, K=2)
    targets = {1: Target(sites[1].n, FEATS.mean(sites[1].X)), 2: Target(50, np.array([40.0, 0.0]))}
    with pytest.raises(InfeasibleTarget) as info:
        br_fit_site(sites[1], targets, FEATS)
    assert info.value.target == 2


def test_constant_outcome_residual_aggregates_vanish():
    sites = constant_toy(4)
    _, _, brads = br_setup(sites)
    for b in brads.values():
        assert all(abs(v) <= 1e-12 for v in b.O2.values())
        assert all(abs(v) <= 1e-12 for v in b.O4.values())
        assert all(np.max(np.abs(v)) <= 1e-12 for v in b.O5.values())


def test_weighted_residual_sums_vanish(br3):
    sites, _, _, brads = br3
    for b in brads.values():
        for subset in all_subsets(sites):
            assert abs(sum(b.O2[(j, subset)] for j in subset)) <= 1e-8


def test_aggregates_match_straight_loop(br3):
    sites, _, fits, brads = br3
    for s, d in sites.items():
        ref = loop_br_aggregates(d, fits[s], FEATS)
        b = brads[s]
        np.testing.assert_allclose(b.O1, ref["O1"], rtol=1e-12)
        np.testing.assert_allclose(b.O3, ref["O3"], rtol=1e-12)
        for key, v in ref["O2"].items():
            assert b.O2[key] == pytest.approx(v, rel=1e-9, abs=1e-10)
        for key, v in ref["O4"].items():
            assert b.O4[key] == pytest.approx(v, rel=1e-12)
        for key, v in ref["O5"].items():
            np.testing.assert_allclose(b.O5[key], v, rtol=1e-9, atol=1e-10)
        assert np.all(np.linalg.eigvalsh(b.O3) >= -1e-9)


def test_constant_toy_point_and_variance():
    sites = constant_toy(4)
    _, _, brads = br_setup(sites)
    est = br_estimate(brads, (1, 2), 1, 2)
    assert est.tau_hat == pytest.approx(2.0, abs=1e-12)
    assert abs(est.variance) <= 1e-12


def test_triple_identity_and_pooled_variance(br3):
    sites, _, fits, brads = br3
    for subset in all_subsets(sites):
        models, weights = nuisance_models(sites, fits, subset)
        ads = aggregates(sites, models, weights)
        probs = probs_of(weights, sites)
        for k, kp in itertools.permutations(sites, 2):
            est = br_estimate(brads, subset, k, kp)
            assert est.tau_hat == pytest.approx(dac_tau(ads, subset, k, kp).tau_hat, abs=1e-10)
            assert est.tau_hat == pytest.approx(dcw_tau(ads, subset, k, kp).tau_hat, abs=1e-10)
            tau, var, _ = loop_pooled_eif(sites, models, probs, subset, k, kp)
            assert est.tau_hat == pytest.approx(tau, rel=1e-10)
            assert est.variance == pytest.approx(var, rel=1e-10)
            assert est.variance >= -1e-12


def test_br_dor_matches_ols_sandwich(br3):
    sites, _, _, brads = br3
    models = {s: fit_outcome(d.X, d.y, BasisSpec("linear"), site=s) for s, d in sites.items()}
    for subset in all_subsets(sites):
        for k, kp in itertools.permutations(sites, 2):
            est = br_dor_estimate(brads, subset, k, kp)
            tau, var = loop_dor(sites, models, subset, k, kp)
            assert est.method == "DOR"
            assert est.tau_hat == pytest.approx(tau, rel=1e-10)
            assert est.variance == pytest.approx(var, rel=1e-9)


def test_point_then_variance_is_estimate(br3):
    *_, brads = br3
    p = br_tau(brads, (1, 3), 2, 3)
    assert br_var(brads, (1, 3), 2, 3, p.tau_hat) == br_estimate(brads, (1, 3), 2, 3).variance


def test_general_weight_basis_is_experimental_and_solves_equations():
    sites = make_sites(33, K=2, p=2, nmin=150, nmax=200)
    g = CalibrationFeatures((0, 1))
    a = CalibrationFeatures((1, 0))
    targets = {s: Target(d.n, g.mean(d.X)) for s, d in sites.items()}
    fit = br_fit_site(sites[1], targets, g, weight_features=a)
    assert fit.experimental
    G = np.hstack([np.ones((sites[1].n, 1)), g(sites[1].X)])
    t2 = fit.tilts[2]
    np.testing.assert_allclose(G.T @ t2, targets[2].n * np.concatenate([[1.0], targets[2].gbar]), rtol=1e-8)
