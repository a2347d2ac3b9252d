import itertools

import numpy as np
import pytest

from conftest import aggregates, calibrate_all, constant_toy, fit_models, make_sites, probs_of
from fedcmp.dac import (
    EstimateReport,
    all_subsets,
    bias_correction,
    dac_estimate,
    dac_mu,
    dac_tau,
    dac_var,
    dcw_mu,
    dcw_tau,
    dor_estimate,
    dor_tau,
    parse_subset,
    pooled_oracle,
    site_aggregates,
    subset_label,
)
from fedcmp.data import CalibrationFeatures, SiteDataset
from fedcmp.errors import EmptySubset, MissingModel, MissingWeights, SameComparators, UnknownSite
from oracles import loop_dor, loop_pooled_eif, loop_site_aggregates


@pytest.fixture(scope="module")
def toy():
    sites = constant_toy()
    models = fit_models(sites)
    weights = calibrate_all(sites)
    return sites, models, weights, aggregates(sites, models, weights)


def test_constant_toy_estimates(toy):
    sites, models, weights, ads = toy
    assert dac_tau(ads, (1, 2), 1, 2).tau_hat == pytest.approx(2.0, abs=1e-12)
    assert dor_tau(ads, (1, 2), 1, 2).tau_hat == pytest.approx(2.0, abs=1e-12)
    assert dcw_tau(ads, (1, 2), 1, 2).tau_hat == pytest.approx(2.0, abs=1e-12)
    assert pooled_oracle(sites, models, weights, (1, 2), 1, 2).tau == pytest.approx(2.0, abs=1e-12)
    assert abs(dac_var(ads, (1, 2), 1, 2, 2.0)) <= 1e-12


def test_constant_outcome_aggregates_vanish(toy):
    _, _, _, ads = toy
    for ad in ads.values():
        assert all(abs(v) <= 1e-12 for v in ad.A2.values())
        assert all(abs(v) <= 1e-12 for v in ad.A4.values())


def test_identical_sites_self_residual_mean_zero():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 2))
    y = X @ [1.0, 2.0] + rng.normal(size=30)
    sites = {1: SiteDataset(1, y, X), 2: SiteDataset(2, y, X)}
    models = fit_models(sites)
    weights = calibrate_all(sites)
    np.testing.assert_allclose(weights[(2, 1)].weights, 1 / 30, atol=1e-15)
    ads = aggregates(sites, models, weights)
    assert abs(ads[1].A2[1]) <= 1e-12 and abs(ads[2].A2[2]) <= 1e-12


def test_aggregates_match_straight_loop(setup3):
    sites, models, weights, ads = setup3
    probs = probs_of(weights, sites)
    sizes = {s: d.n for s, d in sites.items()}
    for j, d in sites.items():
        ref = loop_site_aggregates(d, models, {l: probs[(l, j)] for l in sites}, sizes)
        for name in ("A1", "A2", "A3", "A4", "A5", "B2"):
            got = getattr(ads[j], name)
            for key, val in ref[name].items():
                assert got[key] == pytest.approx(val, rel=1e-12, abs=1e-12), (name, key)


def test_aggregate_symmetries(setup3):
    *_, ads = setup3
    for ad in ads.values():
        for (a, b), v in ad.A3.items():
            assert v == ad.A3[(b, a)] and v >= 0
        for (a, b), v in ad.A4.items():
            assert v == ad.A4[(b, a)]


def test_site_aggregates_errors(setup3):
    sites, models, weights, _ = setup3
    sizes = {s: d.n for s, d in sites.items()}
    with pytest.raises(MissingModel):
        site_aggregates(sites[1], {1: models[1], 2: models[2]}, {}, sizes)
    with pytest.raises(MissingWeights):
        site_aggregates(sites[1], models, {2: weights[(2, 1)]}, sizes)


def test_lossless_against_loop_oracle(setup3):
    sites, models, weights, ads = setup3
    probs = probs_of(weights, sites)
    for subset in all_subsets(sites):
        for k, kp in itertools.permutations(sites, 2):
            est = dac_estimate(ads, subset, k, kp)
            tau, var, mu = loop_pooled_eif(sites, models, probs, subset, k, kp)
            assert est.tau_hat == pytest.approx(tau, rel=1e-10)
            assert est.variance == pytest.approx(var, rel=1e-10)
            assert est.mu_hat[k] == pytest.approx(mu[k], rel=1e-10)
            ref = pooled_oracle(sites, models, weights, subset, k, kp)
            assert est.tau_hat == pytest.approx(ref.tau, rel=1e-10)
            assert est.variance == pytest.approx(ref.variance, rel=1e-10)


def test_two_site_seeded_matches_pooled():
    sites = make_sites(21, K=2, nmin=20, nmax=20)
    models = fit_models(sites)
    weights = calibrate_all(sites)
    ads = aggregates(sites, models, weights)
    ref = pooled_oracle(sites, models, weights, (1, 2), 1, 2)
    assert dac_tau(ads, (1, 2), 1, 2).tau_hat == pytest.approx(ref.tau, rel=1e-10)


def test_single_site_subset_reduces_to_local_augmented_mean(setup3):
    sites, models, weights, ads = setup3
    d = sites[2]
    m2, m3 = models[2].predict(d.X), models[3].predict(d.X)
    w3 = weights[(2, 3)].weights * d.n
    r3 = sites[3].y - models[3].predict(sites[3].X)
    # target {2}: mu_2 is the plain local mean, mu_3 adds site 3's tilted residuals
    expect = np.mean(m3) + np.sum(w3 * r3) / d.n - (np.mean(m2) + np.mean(sites[2].y - m2))
    assert dac_tau(ads, (2,), 2, 3).tau_hat == pytest.approx(expect, rel=1e-10)


def test_dor_matches_loop_oracle(setup3):
    sites, _, weights, _ = setup3
    models = fit_models(sites, {2: "cubic-spline"})
    ads = aggregates(sites, models, weights)
    for subset in all_subsets(sites):
        for k, kp in itertools.permutations(sites, 2):
            est = dor_estimate(ads, subset, k, kp)
            tau, var = loop_dor(sites, models, subset, k, kp)
            assert est.tau_hat == pytest.approx(tau, rel=1e-10)
            assert est.variance == pytest.approx(var, rel=1e-9)


def test_dor_equals_dac_when_models_fit_exactly():
    rng = np.random.default_rng(8)
    sites = {}
    for s in (1, 2, 3):
        X = rng.normal(0.1 * s, 1, size=(40, 2))
        sites[s] = SiteDataset(s, s + X @ [1.0, -2.0], X)
    models = fit_models(sites)
    weights = calibrate_all(sites)
    ads = aggregates(sites, models, weights)
    for subset in all_subsets(sites):
        assert dor_tau(ads, subset, 1, 3).tau_hat == pytest.approx(dac_tau(ads, subset, 1, 3).tau_hat, abs=1e-10)


def test_dcw_differs_under_misspecified_weights(setup3):
    sites, models, weights, _ = setup3
    # calibrate on the first covariate only: the second stays imbalanced
    bad = calibrate_all(sites, CalibrationFeatures((0,)))
    ads = aggregates(sites, models, bad)
    assert abs(dac_tau(ads, (1, 2, 3), 1, 3).tau_hat - dcw_tau(ads, (1, 2, 3), 1, 3).tau_hat) > 1e-3


def test_difference_identity(setup3):
    sites, models, weights, ads = setup3
    probs = probs_of(weights, sites)
    for subset in all_subsets(sites):
        for k in sites:
            # direct: sum over target sites of n_j (mean of m_k at j) - weighted fitted values at site k
            n_i = sum(sites[j].n for j in subset)
            mk_at_k = models[k].predict(sites[k].X)
            direct = sum(np.sum(models[k].predict(sites[j].X)) - sites[j].n * np.sum(probs[(j, k)] * mk_at_k)
                         for j in subset) / n_i
            assert bias_correction(ads, subset, k) == pytest.approx(direct, abs=1e-10)
            assert dac_mu(ads, subset, k) - dcw_mu(ads, subset, k) == pytest.approx(direct, abs=1e-10)


def test_estimator_errors(setup3):
    *_, ads = setup3
    with pytest.raises(SameComparators):
        dac_tau(ads, (1, 2), 2, 2)
    with pytest.raises(EmptySubset):
        dac_tau(ads, (), 1, 2)
    with pytest.raises(UnknownSite):
        dac_tau(ads, (1, 7), 1, 2)
    with pytest.raises(UnknownSite):
        dac_tau(ads, (1,), 1, 9)


def test_report_interval_and_pvalue():
    r = EstimateReport("DAC", 1, 2, (1, 2), 1.0, 0.25)
    assert r.se == 0.5
    assert r.ci_low < r.tau_hat < r.ci_high
    assert r.ci_high - r.tau_hat == pytest.approx(1.959963984540054 * 0.5)
    assert r.p_value == pytest.approx(0.0455002638963584, rel=1e-12)
    assert EstimateReport("DAC", 1, 2, (1,), 0.5, -1e-13).se == 0.0


def test_subset_helpers():
    assert all_subsets([3, 1, 2])[:4] == [(1,), (2,), (3,), (1, 2)]
    assert len(all_subsets(range(1, 5))) == 15
    assert subset_label((1, 2, 4)) == "1+2+4"
    assert parse_subset("4+1") == (1, 4)
    with pytest.raises(ValueError):
        all_subsets(range(13))
