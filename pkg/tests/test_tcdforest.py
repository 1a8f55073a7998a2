import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostudy.errors import ConfigError, DataError
from twostudy.tcdforest import (
    CartConfig,
    ForestModel,
    ForestParams,
    TcdRecords,
    bootstrap_se,
    compute_tcd,
    compute_tcd_continuous,
    default_grid,
    encode,
    fit_forest,
    grow_tcd_tree,
    node_stats,
    tune_forest,
)

from conftest import make_table


class Const(ForestModel):
    def __init__(self, value):
        super().__init__(ForestParams(), None, float("nan"), None, 1, constants=np.array([value]))


def test_depth_zero_forest_predicts_training_mean():
    X = np.arange(10.0)[:, None]
    y = np.arange(10.0)
    f = fit_forest(X, y, ForestParams(n_trees=3, max_depth=0, bootstrap=False), seed=0)
    np.testing.assert_allclose(f.predict(X), 4.5)


def test_depth_zero_bootstrap_mean_of_resample_means():
    X = np.zeros((50, 1))
    y = np.random.default_rng(0).normal(size=50)
    f = fit_forest(X, y, ForestParams(n_trees=400, max_depth=0), seed=1)
    assert f.predict(X[:1])[0] == pytest.approx(y.mean(), abs=0.05)


def test_tcd_examples():
    mu0, mu1 = Const(5.0), Const(7.0)
    rec = compute_tcd(["t", "c"], np.zeros((2, 1)), [5.0, 2.0], [1, 0], mu0, mu1, "prediction")
    np.testing.assert_allclose(rec.gamma, [0.0, 5.0])
    np.testing.assert_allclose(rec.counterfactual, [5.0, 7.0])
    rows = list(rec.rows())
    assert rows[1]["gamma_hat"] == 5.0 and rows[1]["source_set"] == "prediction"


def test_tcd_plugin_formula():
    rec = compute_tcd(["a"], np.zeros((1, 1)), [100.0], [1], Const(5.0), Const(7.0), "prediction", formula="plugin")
    assert rec.gamma[0] == 2.0
    with pytest.raises(ConfigError):
        compute_tcd(["a"], np.zeros((1, 1)), [1.0], [1], Const(5.0), Const(7.0), "p", formula="other")


def test_tcd_requires_arm():
    with pytest.raises(DataError):
        compute_tcd(["a"], np.zeros((1, 1)), [1.0], [2], Const(0), Const(0), "p")


def test_continuous_tcd_and_zero_delta():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(400, 1))
    a = rng.uniform(0, 70, 400)
    f = fit_forest(np.column_stack([X, a]), -0.1 * a, ForestParams(n_trees=50, min_node_size=2), seed=0)
    rec = compute_tcd_continuous(np.arange(400), X, a * 0 + 10, f, delta=45)
    assert np.median(rec.gamma) == pytest.approx(-4.5, abs=0.5)
    with pytest.warns(UserWarning):
        zero = compute_tcd_continuous(np.arange(400), X, a, f, delta=0)
    assert np.all(zero.gamma == 0)


def test_forest_seed_reproducible_and_worker_independent():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 3))
    y = X[:, 0] + rng.normal(size=300)
    p = ForestParams(n_trees=40)
    a = fit_forest(X, y, p, seed=5, workers=1).predict(X)
    b = fit_forest(X, y, p, seed=5, workers=3).predict(X)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, fit_forest(X, y, p, seed=6).predict(X))


def test_forest_errors():
    with pytest.raises(DataError):
        fit_forest(np.zeros((0, 1)), np.zeros(0), ForestParams(), 0)
    with pytest.raises(DataError):
        fit_forest(np.zeros((3, 1)), np.zeros(3), ForestParams(min_node_size=5), 0)
    f = fit_forest(np.zeros((10, 2)), np.zeros(10), ForestParams(n_trees=2), 0)
    with pytest.raises(DataError):
        f.predict(np.zeros((1, 3)))


def test_tune_forest_prefers_fitting_params():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(400, 2))
    y = np.sin(6 * X[:, 0]) + 0.1 * rng.normal(size=400)
    grid = [ForestParams(n_trees=30, max_depth=0), ForestParams(n_trees=30, min_node_size=5)]
    res = tune_forest(X, y, grid, k_folds=3, seed=0)
    assert res.best == grid[1]
    assert len(res.table) == 2
    assert len(default_grid(9)) == 12
    assert len(default_grid(20)) == 24


def test_encode_one_hot():
    t = make_table({"g": [0, 2], "x": [1.5, 2.5]}, [0, 0], [0, 0], kinds={"g": "categorical"}, levels={"g": ("a", "b", "c")})
    X, spec = encode(t)
    np.testing.assert_array_equal(X, [[1, 0, 0, 1.5], [0, 0, 1, 2.5]])
    assert spec == [("g", 0), ("g", 1), ("g", 2), ("x", None)]


def test_constant_gamma_gives_single_leaf():
    t = make_table({"x": np.arange(500.0)}, np.zeros(500), np.zeros(500))
    fit = grow_tcd_tree(np.full(500, 1.7), t, CartConfig(min_leaf=20), seed=0)
    assert fit.tree.n_leaves == 1


def test_cart_recovers_binary_split():
    rng = np.random.default_rng(3)
    n = 3000
    b = rng.integers(0, 2, n)
    w = rng.uniform(size=n)
    gamma = np.where(b == 1, 2.0, 0.0) + rng.normal(0, 0.5, n)
    t = make_table({"b": b, "w": w}, np.zeros(n), np.zeros(n), kinds={"b": "binary"})
    fit = grow_tcd_tree(gamma, t, CartConfig(min_leaf=100), seed=3)
    assert fit.tree.n_leaves == 2
    assert fit.tree.root.predicate.variable == "b"
    leaf_of = fit.tree.assign(t)
    np.testing.assert_array_equal(leaf_of, (b == 1).astype(int))


def test_cart_categorical_subset():
    rng = np.random.default_rng(4)
    n = 3000
    g = rng.integers(0, 3, n)
    gamma = np.where(g == 1, -3.0, 0.0) + rng.normal(0, 0.5, n)
    t = make_table({"g": g}, np.zeros(n), np.zeros(n), kinds={"g": "categorical"}, levels={"g": ("a", "b", "c")})
    fit = grow_tcd_tree(gamma, t, CartConfig(min_leaf=100), seed=4)
    leaf_of = fit.tree.assign(t)
    assert fit.tree.n_leaves == 2
    assert len(set(leaf_of[g == 1])) == 1
    assert set(leaf_of[g == 1]).isdisjoint(leaf_of[g != 1])


def test_node_stats_example():
    rec = TcdRecords(np.array(["a", "b"], dtype=object), np.array([1, 0]), np.zeros(2), np.zeros(2), np.array([1.0, 3.0]), "validation")
    stats = node_stats(rec, np.array([0, 0]), n_leaves=2, n_bootstrap=200, seed=0)
    assert len(stats) == 1
    assert stats[0].mean_gamma == 2.0
    assert stats[0].n_units == 2
    assert stats[0].bootstrap_se > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(30, 300))
def test_bootstrap_se_near_analytic(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    se = bootstrap_se(v, 2000, np.random.default_rng(seed + 1))
    analytic = v.std() / np.sqrt(n)
    assert se == pytest.approx(analytic, rel=0.15)
