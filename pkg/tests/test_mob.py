import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostudy.cohort import split
from twostudy.errors import ConfigError
from twostudy.glm import design_matrix, fit_ols
from twostudy.mob import MobConfig, find_cutpoint, grow, instability_test, predict, tune
from twostudy.rules import serialize

from conftest import make_table


def planted(n=4000, seed=0, slopes=(-2.0, 2.0), noise=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, n)
    w = rng.uniform(0, 1, n)
    a = rng.uniform(0, 1, n)
    tau = np.where(x <= 0.5, slopes[0], slopes[1])
    y = 1 + tau * a + rng.normal(0, noise, n)
    return make_table({"x": x, "w": w}, y, a)


def test_recovers_planted_split():
    t = planted()
    tree = grow(t, MobConfig(min_cluster_size=200, n_permutations=199, seed=1))
    assert tree.n_leaves == 2
    assert tree.root.predicate.variable == "x"
    assert abs(tree.root.predicate.threshold - 0.5) < 0.05
    est = [lf.metadata["train_estimate"] for lf in tree.leaves]
    assert est[0] == pytest.approx(-2, abs=0.3)
    assert est[1] == pytest.approx(2, abs=0.3)


def test_homogeneous_effect_gives_single_leaf():
    rng = np.random.default_rng(3)
    n = 3000
    x, a = rng.uniform(size=n), rng.uniform(size=n)
    t = make_table({"x": x}, 1 + 0.5 * a + rng.normal(size=n), a)
    tree = grow(t, MobConfig(min_cluster_size=200, n_permutations=199, seed=2))
    assert tree.n_leaves == 1


def test_leaf_metadata_matches_leaf_ols():
    t = planted(seed=5)
    tree = grow(t, MobConfig(min_cluster_size=200, n_permutations=199, seed=5))
    leaf_of = tree.assign(t)
    for lf in tree.leaves:
        sub = t.subset(np.nonzero(leaf_of == lf.leaf_id)[0])
        X, y, names = design_matrix(sub)
        fit = fit_ols(X, y, names)
        assert lf.metadata["train_estimate"] == pytest.approx(fit.coef("treatment"), abs=1e-10)
        assert lf.metadata["train_se"] == pytest.approx(fit.se("treatment"), abs=1e-10)
        assert lf.metadata["n_train"] == len(sub) >= 200


def test_predict_uses_leaf_coefficients():
    t = planted(seed=6)
    tree = grow(t, MobConfig(min_cluster_size=200, n_permutations=199, seed=6))
    pred = predict(tree, t)
    leaf_of = tree.assign(t)
    for lf in tree.leaves:
        m = leaf_of == lf.leaf_id
        c = lf.metadata["coefficients"]
        np.testing.assert_allclose(pred[m], c["intercept"] + c["treatment"] * t.treatment[m])


def test_same_seed_same_tree():
    t = planted(seed=8, slopes=(-0.4, 0.4))
    cfg = MobConfig(min_cluster_size=150, n_permutations=199, seed=9)
    assert serialize(grow(t, cfg)) == serialize(grow(t, cfg))


def test_depth_and_size_limits():
    t = planted(seed=2)
    assert grow(t, MobConfig(min_cluster_size=200, max_depth=0, n_permutations=199)).n_leaves == 1
    assert grow(t, MobConfig(min_cluster_size=2001, n_permutations=199)).n_leaves == 1


def test_categorical_split():
    rng = np.random.default_rng(4)
    n = 3000
    g = rng.integers(0, 4, n)
    a = rng.uniform(size=n)
    tau = np.where(np.isin(g, [1, 3]), 3.0, 0.0)
    t = make_table(
        {"g": g}, tau * a + rng.normal(size=n), a, kinds={"g": "categorical"}, levels={"g": ("a", "b", "c", "d")}
    )
    tree = grow(t, MobConfig(min_cluster_size=200, n_permutations=199, seed=4))
    assert tree.n_leaves == 2
    assert set(tree.root.predicate.levels) in ({"a", "c"}, {"b", "d"})


def _brute_force_cut(t, variable, min_size):
    z = t.column(variable)
    X, y, _ = design_matrix(t)
    vals = np.unique(z)
    best = None
    for lo, hi in zip(vals[:-1], vals[1:]):
        c = (lo + hi) / 2
        m = z <= c
        if m.sum() < min_size or (~m).sum() < min_size:
            continue
        rss = sum(float(f.residuals @ f.residuals) for f in (fit_ols(X[m], y[m]), fit_ols(X[~m], y[~m])))
        if best is None or rss < best[0] - 1e-9:
            best = (rss, c)
    return best


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(12, 80))
def test_cutpoint_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 15, n).astype(float)
    a = rng.uniform(size=n)
    y = np.where(x < 7, 1.0, -1.0) * a + rng.normal(size=n)
    t = make_table({"x": x}, y, a)
    X, yy, _ = design_matrix(t)
    cut = find_cutpoint(X, yy, t, "x", min_size=4)
    brute = _brute_force_cut(t, "x", 4)
    if brute is None:
        assert cut is None
    else:
        assert cut.objective == pytest.approx(brute[0], rel=1e-8, abs=1e-8)
        assert cut.threshold == pytest.approx(brute[1])


def test_instability_ignores_constant_variable():
    rng = np.random.default_rng(0)
    n = 500
    a = rng.uniform(size=n)
    t = make_table({"c": np.ones(n), "x": rng.uniform(size=n)}, a + rng.normal(size=n), a)
    X, y, _ = design_matrix(t)
    fit = fit_ols(X, y)
    cfg = MobConfig(min_cluster_size=10, n_permutations=199)
    rep = instability_test(fit.score_matrix, t, cfg, np.random.default_rng(1))
    assert rep.tested
    assert all(e.p_value == 1.0 for e in rep.entries if e.variable == "c")
    assert rep.selected_variable != "c"


def test_permutation_floor_warns():
    rng = np.random.default_rng(0)
    cov = {f"v{i}": rng.uniform(size=100) for i in range(6)}
    t = make_table(cov, rng.normal(size=100), rng.uniform(size=100))
    X, y, _ = design_matrix(t)
    cfg = MobConfig(min_cluster_size=10, n_permutations=199, alpha=0.01)
    with pytest.warns(UserWarning, match="permutations"):
        instability_test(fit_ols(X, y).score_matrix, t, cfg, rng)


def test_config_validation():
    with pytest.raises(ConfigError):
        MobConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        MobConfig(n_permutations=10)
    with pytest.raises(ConfigError):
        MobConfig(min_cluster_size=3)
    with pytest.raises(ConfigError):
        grow(planted(n=100), MobConfig(candidate_variables=("bmi",), min_cluster_size=10))


def test_tune_picks_informative_feature_set():
    t = split(planted(n=4000, seed=11), [("train", 0.5), ("validation", 0.5)], seed=1)
    res = tune(t, [("w",), ("x",)], [200], MobConfig(n_permutations=199, seed=1))
    assert res.feature_set == ("x",)
    assert res.tree.n_leaves >= 2
    assert len(res.scores) == 2
