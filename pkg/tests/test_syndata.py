from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostudy.cohort import write_csv
from twostudy.errors import ConfigError
from twostudy.glm import fit_ols
from twostudy.rules import classify
from twostudy.study2 import build_indicator
from twostudy.syndata import (
    CovariateSpec,
    default_scenario,
    generate_experimental,
    generate_observational,
    read_truth_csv,
)


def test_truth_leaf_equals_classify():
    t, truth = generate_observational(default_scenario(n_units=500, seed=1))
    tree = default_scenario().planted
    assert [classify(tree, r) for r in t.records()] == truth.true_leaf.tolist()
    taus = np.array([tree.leaf(k).metadata["tau"] for k in truth.true_leaf])
    np.testing.assert_array_equal(truth.true_tau, taus)


def test_noiseless_gaussian_binary_effect_is_tau():
    sc = default_scenario(n_units=400, seed=2, exposure="binary", family="gaussian", dispersion=0.0)
    t, truth = generate_observational(sc)
    np.testing.assert_allclose(truth.mu1 - truth.mu0, truth.true_tau)
    np.testing.assert_allclose(t.outcome, np.where(t.treatment == 1, truth.mu1, truth.mu0))


def test_noiseless_continuous_shift_is_tau():
    sc = default_scenario(n_units=400, seed=3, family="gaussian", dispersion=0.0)
    t, truth = generate_observational(sc)
    slope = truth.true_tau / sc.delta
    np.testing.assert_allclose(t.outcome, sc.base + slope * t.treatment)
    # shifting exposure by delta moves the mean by exactly tau
    np.testing.assert_allclose((sc.base + slope * (t.treatment + sc.delta)) - t.outcome, truth.true_tau)


def test_same_seed_byte_identical(tmp_path):
    for k in (1, 2):
        t, truth = generate_experimental(default_scenario("experimental", n_units=300, seed=9))
        write_csv(t, tmp_path / f"p{k}.csv")
        truth.write_csv(tmp_path / f"t{k}.csv")
    assert (tmp_path / "p1.csv").read_bytes() == (tmp_path / "p2.csv").read_bytes()
    assert (tmp_path / "t1.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()
    back = read_truth_csv(tmp_path / "t1.csv")
    assert len(back) == 300 and all(k.startswith("u") for k in back)


def test_different_seeds_differ():
    a, _ = generate_observational(default_scenario(n_units=100, seed=1))
    b, _ = generate_observational(default_scenario(n_units=100, seed=2))
    assert not np.array_equal(a.outcome, b.outcome)


def _naive_slope(sc):
    t, truth = generate_observational(sc)
    X = np.column_stack([np.ones(len(t)), t.treatment])
    return fit_ols(X, t.outcome).coefficients[1], float(np.mean(truth.true_tau)) / sc.delta


def test_confounding_biases_naive_slope_upward():
    kw = dict(n_units=20000, seed=4, family="gaussian", dispersion=0.5, prognostic={"age": 0.5})
    sc = default_scenario(**kw)
    tree = sc.planted.copy()
    for lf in tree.leaves:
        lf.metadata["tau"] = 0.0
    free, true0 = _naive_slope(replace(sc, planted=tree))
    conf, true1 = _naive_slope(replace(sc, planted=tree, confounding=2.0, confounder="age"))
    assert true0 == true1 == 0.0
    assert abs(free) < 0.003
    assert conf > 0.01


def test_exposure_uniform_without_confounding():
    t, _ = generate_observational(default_scenario(n_units=20000, seed=5))
    assert t.treatment.min() >= 0 and t.treatment.max() <= 70
    assert np.mean(t.treatment > 35) == pytest.approx(0.5, abs=0.02)


def test_experimental_panel_shape():
    sc = default_scenario("experimental", n_units=1000, seed=6)
    p, truth = generate_experimental(sc)
    assert len(p) == 2000 and p.n_units == 1000
    b = build_indicator(p, sc.threshold).as_dict()
    firm = dict(zip(p.unit_id, p.firm_group))
    # B = 1 exactly for treatment-firm units
    assert all((b[u] == 1) == (firm[u] == "treatment-firm") for u in b)
    assert np.mean([v == 1 for v in b.values()]) == pytest.approx(0.5, abs=0.06)
    assert np.all(p.outcome == np.round(p.outcome)) and np.all(p.outcome >= 0)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        default_scenario("experimental", n_units=10, a1_range=(5, 40))
    with pytest.raises(ConfigError):
        default_scenario(n_units=0)
    with pytest.raises(ConfigError):
        generate_experimental(default_scenario(n_units=10))


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 10), st.integers(0, 2**32 - 1))
def test_numeric_draw_in_range(low, width, seed):
    spec = CovariateSpec("x", "numeric", low, low + width)
    v = spec.draw(np.random.default_rng(seed), 200)
    assert np.all((v >= low) & (v <= low + width))
