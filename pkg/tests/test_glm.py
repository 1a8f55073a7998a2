import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from twostudy.errors import DataError, RankDeficientError
from twostudy.glm import (
    cluster_meat,
    design_matrix,
    difference_test,
    fit_negbin,
    fit_ols,
    nb_loglik,
    score_matrix,
    transform_outcome,
    wald_test,
)

from conftest import make_table

THREE_X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
THREE_Y = np.array([1.0, 2.0, 4.0])


def test_ols_three_points():
    fit = fit_ols(THREE_X, THREE_Y, ("intercept", "treatment"))
    assert fit.coef("intercept") == pytest.approx(5 / 6, abs=1e-12)
    assert fit.coef("treatment") == pytest.approx(3 / 2, abs=1e-12)
    np.testing.assert_allclose(fit.residuals, [1 / 6, -1 / 3, 1 / 6], atol=1e-12)
    raw = score_matrix(fit, THREE_X, normalize=False)
    np.testing.assert_allclose(raw[:, 1], [0, -1 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(fit.score_matrix, raw / fit.sigma2)


def test_ols_constant_outcome():
    X = np.column_stack([np.ones(5), np.arange(5.0)])
    fit = fit_ols(X, np.full(5, 3.0))
    np.testing.assert_allclose(fit.coefficients, [3.0, 0.0], atol=1e-12)
    assert fit.sigma2 == 0.0
    np.testing.assert_allclose(fit.residuals, 0, atol=1e-12)
    assert np.all(fit.score_matrix == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(10, 200), st.integers(2, 5))
def test_ols_matches_normal_equations(seed, n, k):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = X @ rng.normal(size=k) + rng.normal(size=n)
    direct = np.linalg.solve(X.T @ X, X.T @ y)
    fit = fit_ols(X, y)
    np.testing.assert_allclose(fit.coefficients, direct, rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_singleton_clusters_equal_hc0(seed):
    rng = np.random.default_rng(seed)
    n = 60
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.random(n)])
    y = X @ [1, 2, -1] + rng.normal(size=n) * (1 + X[:, 2])
    robust = fit_ols(X, y, cov_type="robust")
    cluster = fit_ols(X, y, cov_type="cluster", clusters=np.arange(n))
    np.testing.assert_allclose(cluster.covariance, robust.covariance, rtol=0, atol=1e-10)


def test_hc0_matches_statsmodels():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(80), rng.normal(size=80)])
    y = X @ [0.5, 1.0] + rng.normal(size=80) * np.abs(X[:, 1])
    ours = fit_ols(X, y, cov_type="robust")
    ref = sm.OLS(y, X).fit(cov_type="HC0")
    np.testing.assert_allclose(ours.covariance, ref.cov_params(), rtol=1e-10)
    model = fit_ols(X, y)
    np.testing.assert_allclose(model.covariance, sm.OLS(y, X).fit().cov_params(), rtol=1e-10)


def test_cluster_meat_groups_scores():
    s = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    m = cluster_meat(s, ["a", "a", "b"])
    summed = np.array([[4.0, 6.0], [5.0, 6.0]])
    np.testing.assert_allclose(m, summed.T @ summed)


def test_rank_deficient_design():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficientError):
        fit_ols(X, np.arange(10.0))
    with pytest.raises(RankDeficientError):
        fit_ols(np.ones((1, 2)), np.ones(1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ols_scores_vanish(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 500))
    X = np.column_stack([np.ones(n), rng.uniform(0, 70, n), rng.normal(size=n)])
    y = rng.normal(size=n) * 3
    fit = fit_ols(X, y)
    assert np.all(np.abs(fit.score_matrix.sum(axis=0)) < 1e-8 * n)


def test_design_matrix_dummy_codes():
    t = make_table(
        {"g": [0, 1, 2, 1], "x": [1.0, 2.0, 3.0, 4.0]},
        [1, 2, 3, 4],
        [0, 1, 0, 1],
        kinds={"g": "categorical"},
        levels={"g": ("a", "b", "c")},
    )
    X, y, names = design_matrix(t, adjust=("g", "x"))
    assert names == ("intercept", "treatment", "g[b]", "g[c]", "x")
    np.testing.assert_array_equal(X[:, 2], [0, 1, 0, 1])
    np.testing.assert_array_equal(X[:, 3], [0, 0, 1, 0])


def test_log1p_transform():
    np.testing.assert_allclose(transform_outcome(np.array([0.0, math.e - 1]), "log1p"), [0.0, 1.0])
    with pytest.raises(DataError):
        transform_outcome(np.array([-1.0]), "log1p")


def test_log_scale_shock_coefficient():
    # outcomes falling 13.5% over a 45-unit exposure change
    a = np.linspace(0, 90, 31)
    y = np.exp(1.0 + a * math.log(0.865) / 45)
    fit = fit_ols(np.column_stack([np.ones_like(a), a]), np.log(y))
    assert fit.coefficients[1] == pytest.approx(math.log(0.865) / 45, abs=1e-12)
    assert fit.coefficients[1] == pytest.approx(-0.00322, abs=1e-5)


# negative binomial ------------------------------------------------------------

FIXTURE_X = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1], dtype=float)
FIXTURE_Y = np.array([0, 2, 5, 1, 9, 3, 12, 0, 7, 15], dtype=float)


def _profile_alpha_grid(y, mu):
    """Brute-force maximizer of the NB2 log-likelihood in alpha for fixed means."""

    def ll(a):
        return (
            gammaln(y[:, None] + 1 / a) - gammaln(1 / a) - gammaln(y[:, None] + 1)
            + y[:, None] * np.log(a * mu[:, None] / (1 + a * mu[:, None]))
            - np.log1p(a * mu[:, None]) / a
        ).sum(axis=0)

    grid = np.linspace(1e-4, 5, 50001)
    a = grid[np.argmax(ll(grid))]
    fine = np.linspace(max(a - 2e-4, 1e-6), a + 2e-4, 4001)
    return fine[np.argmax(ll(fine))]


def test_negbin_matches_brute_force_grid():
    X = np.column_stack([np.ones(10), FIXTURE_X])
    fit = fit_negbin(X, FIXTURE_Y)
    # with one binary regressor the means are the group means for any alpha,
    # so a (beta0, beta1) grid collapses to these two values
    m0, m1 = FIXTURE_Y[FIXTURE_X == 0].mean(), FIXTURE_Y[FIXTURE_X == 1].mean()
    grid_b = np.linspace(-0.5, 0.5, 2001)
    mu_fn = lambda b0, b1: np.exp(b0 + b1 * FIXTURE_X)
    a_star = _profile_alpha_grid(FIXTURE_Y, np.where(FIXTURE_X == 1, m1, m0))
    b0_vals = [nb_loglik(FIXTURE_Y, mu_fn(math.log(m0) + d, math.log(m1 / m0)), a_star) for d in grid_b[::20]]
    b0_best = math.log(m0) + grid_b[::20][int(np.argmax(b0_vals))]
    b1_vals = [nb_loglik(FIXTURE_Y, mu_fn(b0_best, math.log(m1 / m0) + d), a_star) for d in grid_b]
    b1_best = math.log(m1 / m0) + grid_b[int(np.argmax(b1_vals))]
    np.testing.assert_allclose(fit.coefficients, [b0_best, b1_best], atol=1e-4)
    assert fit.dispersion == pytest.approx(a_star, abs=1e-4)


def test_negbin_matches_statsmodels():
    rng = np.random.default_rng(11)
    n = 400
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
    mu = np.exp(X @ [1.0, 0.3, -0.4])
    y = rng.poisson(mu * rng.gamma(2.0, 0.5, n)).astype(float)
    ours = fit_negbin(X, y)
    ref = sm.NegativeBinomial(y, X).fit(method="newton", disp=0, tol=1e-12, maxiter=500)
    np.testing.assert_allclose(ours.coefficients, ref.params[:3], atol=1e-6)
    assert ours.dispersion == pytest.approx(ref.params[3], abs=1e-6)


def test_negbin_zero_dispersion_is_poisson():
    rng = np.random.default_rng(2)
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.poisson(np.exp(0.5 + 0.2 * X[:, 1])).astype(float)
    ours = fit_negbin(X, y, dispersion=0.0)
    ref = sm.GLM(y, X, family=sm.families.Poisson()).fit(tol=1e-12)
    np.testing.assert_allclose(ours.coefficients, ref.params, atol=1e-6)


def test_negbin_saturated_did():
    # cells (pre, post) x (control, treated) with means (10, 10), (10, 8)
    post = np.array([0, 1, 0, 1] * 5, dtype=float)
    treat = np.array([0, 0, 1, 1] * 5, dtype=float)
    y = np.array([10, 10, 10, 8] * 5, dtype=float)
    X = np.column_stack([np.ones(20), post * treat, post, treat])
    fit = fit_negbin(X, y, clusters=np.repeat(np.arange(10), 2))
    assert fit.coefficients[1] == pytest.approx(math.log(0.8), abs=1e-8)
    assert fit.coefficients[1] == pytest.approx(-0.22314, abs=1e-5)


def test_negbin_constant_outcome():
    fit = fit_negbin(np.ones((8, 1)), np.full(8, 4.0))
    assert fit.coefficients[0] == pytest.approx(math.log(4.0), abs=1e-10)
    assert fit.dispersion == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_negbin_scores_vanish(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(50, 400))
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.normal(size=n)])
    y = rng.negative_binomial(2, 2 / (2 + np.exp(X @ [1.0, -0.3, 0.2]))).astype(float)
    fit = fit_negbin(X, y)
    assert np.all(np.abs(fit.score_matrix.sum(axis=0)) < 1e-8 * n)


def test_negbin_rejects_bad_outcomes():
    X = np.column_stack([np.ones(4), [0, 1, 0, 1]])
    with pytest.raises(DataError):
        fit_negbin(X, np.array([0.5, 1, 2, 3]))
    with pytest.raises(DataError):
        fit_negbin(X, np.zeros(4))


def test_negbin_singleton_clusters_equal_robust_sandwich():
    rng = np.random.default_rng(5)
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.poisson(np.exp(1 + 0.3 * X[:, 1]) * rng.gamma(3, 1 / 3, n)).astype(float)
    a = fit_negbin(X, y, clusters=np.arange(n))
    b = fit_negbin(X, y)
    s = a.score_matrix
    bread = b.covariance
    np.testing.assert_allclose(a.covariance, bread @ (s.T @ s) @ bread, rtol=1e-10)


# Wald tests ------------------------------------------------------------------


def test_wald_examples():
    assert wald_test(0.0, 0.3).p_value == 1.0
    assert wald_test(1.96, 1.0).p_value == pytest.approx(0.05, abs=1e-4)


def test_difference_example():
    d = difference_test((-0.10, 0.02), (-0.12, 0.03))
    assert d.statistic == pytest.approx(0.5547, abs=1e-4)
    assert d.p_value == pytest.approx(0.579, abs=1e-3)


@given(st.floats(-50, 50), st.floats(0.01, 10), st.floats(-5, 5))
def test_wald_symmetric(est, se, null):
    a = wald_test(null + est, se, null)
    b = wald_test(null - est, se, null)
    assert a.p_value == pytest.approx(b.p_value, rel=1e-9, abs=1e-300)
    assert a.statistic == pytest.approx(-b.statistic)


def test_wald_needs_positive_se():
    with pytest.raises(DataError):
        wald_test(1.0, 0.0)
