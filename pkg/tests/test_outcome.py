import json

import numpy as np
import pytest

from fedcmp.errors import DegenerateCovariate, DegenerateFeatures, DimensionMismatch, MissingValues
from fedcmp.outcome import (
    BasisSpec,
    FittedOutcomeModel,
    expand_basis,
    fit_ols,
    fit_outcome,
    fit_wls,
    predict,
)
from oracles import normal_equations


def test_linear_expansion_row():
    np.testing.assert_array_equal(expand_basis([[1.5, -2.0]], BasisSpec("linear")), [[1.0, 1.5, -2.0]])


def test_all_zero_covariates_rank_one():
    X = np.zeros((5, 2))
    design = expand_basis(X, BasisSpec("linear"))
    assert np.linalg.matrix_rank(design) == 1
    m = fit_ols(design, np.arange(5.0))
    assert m.dropped_columns == (1, 2)
    np.testing.assert_allclose(m.coefficients, [2.0])


def test_spline_reproduces_cubic():
    x = np.linspace(-2, 3, 60)
    y = 1.0 - 2.0 * x + 0.5 * x**2 + 0.3 * x**3
    m = fit_outcome(x[:, None], y, BasisSpec("cubic-spline", (4,)))
    assert np.max(np.abs(m.predict(x[:, None]) - y)) <= 1e-6


def test_spline_on_constant_covariate():
    with pytest.raises(DegenerateCovariate):
        expand_basis(np.ones((10, 1)), BasisSpec("cubic-spline"))


def test_spline_first_column_is_constant_and_knots_at_quantiles():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    spec = BasisSpec("cubic-spline", (3,))
    g = expand_basis(X, spec)
    np.testing.assert_array_equal(g[:, 0], 1.0)
    # 3 interior knots -> 7 B-splines per covariate, first one dropped
    assert g.shape[1] == 1 + 2 * 6


def test_ols_constant_outcome():
    m = fit_ols(np.ones((4, 1)), np.full(4, 2.5))
    np.testing.assert_allclose(m.coefficients, [2.5])


def test_ols_noiseless_line():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    m = fit_outcome(x[:, None], 2 + 3 * x, BasisSpec("linear"))
    np.testing.assert_allclose(m.coefficients, [2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(predict(m, [[10.0]]), [32.0], atol=1e-11)


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(4)
    design = np.hstack([np.ones((50, 1)), rng.normal(size=(50, 3))])
    y = rng.normal(size=50)
    m = fit_ols(design, y)
    np.testing.assert_allclose(m.coefficients, normal_equations(design, y), atol=1e-8)
    r = y - design @ m.coefficients
    assert np.max(np.abs(design.T @ r)) <= 1e-8
    assert abs(r.mean()) <= 1e-12


def test_wls_uniform_equals_ols():
    rng = np.random.default_rng(5)
    design = np.hstack([np.ones((30, 1)), rng.normal(size=(30, 2))])
    y = rng.normal(size=30)
    np.testing.assert_allclose(fit_wls(design, y, np.full(30, 0.7)).coefficients, fit_ols(design, y).coefficients,
                               atol=1e-12)


def test_wls_zero_weights_exclude_rows():
    x = np.array([0.0, 1.0, 5.0, 7.0])
    design = np.column_stack([np.ones(4), x])
    y = np.array([1.0, 3.0, -4.0, 10.0])
    w = fit_wls(design, y, [1.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(w.coefficients, fit_ols(design[:2], y[:2]).coefficients, atol=1e-12)


def test_wls_matches_weighted_normal_equations():
    rng = np.random.default_rng(6)
    design = np.hstack([np.ones((40, 1)), rng.normal(size=(40, 3))])
    y = rng.normal(size=40)
    w = rng.uniform(0.1, 3.0, size=40)
    m = fit_wls(design, y, w)
    np.testing.assert_allclose(m.coefficients, normal_equations(design, y, w), atol=1e-8)
    assert np.max(np.abs(design.T @ (w * (y - design @ m.coefficients)))) <= 1e-8


def test_fit_errors():
    with pytest.raises(DegenerateFeatures):
        fit_ols(np.ones((1, 1)) * 0.0, [1.0])
    with pytest.raises(MissingValues):
        fit_outcome([[np.nan], [1.0]], [1.0, 2.0], BasisSpec())
    with pytest.raises(ValueError):
        fit_wls(np.ones((3, 1)), [1.0, 2.0, 3.0], [0.0, 0.0, 0.0])


def test_intercept_only_predictions():
    m = FittedOutcomeModel(BasisSpec("linear", n_covariates=1), [3.0], dropped_columns=(1,), n_columns=2)
    np.testing.assert_array_equal(m.predict([[1.0], [-4.0], [9.0]]), [3.0, 3.0, 3.0])


def test_predict_dimension_mismatch():
    m = fit_outcome(np.arange(6.0).reshape(3, 2), [1.0, 2.0, 4.0], BasisSpec())
    with pytest.raises(DimensionMismatch):
        m.predict(np.ones((2, 3)))


@pytest.mark.parametrize("kind", ["linear", "cubic-spline"])
def test_serialize_roundtrip_predicts_bitwise(kind):
    rng = np.random.default_rng(7)
    X = rng.normal(size=(80, 2))
    y = X[:, 0] ** 2 + rng.normal(size=80)
    m = fit_outcome(X, y, BasisSpec(kind), site=2)
    back = FittedOutcomeModel.from_dict(json.loads(json.dumps(m.to_dict())))
    Xn = rng.normal(size=(20, 2)) * 2
    np.testing.assert_array_equal(back.predict(Xn), m.predict(Xn))


def test_basis_spec_validation():
    with pytest.raises(ValueError):
        BasisSpec("quadratic")
    with pytest.raises(ValueError):
        BasisSpec("cubic-spline", (-1,))
    with pytest.raises(ValueError):
        BasisSpec(include_intercept=False)
