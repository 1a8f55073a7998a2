"""Counterfactual forests, treatment-control differences and the CART on them.

Per-arm regression forests predict the outcome under each arm. For a treated
unit the treatment-control difference (TCD) is its observed outcome minus the
control-arm prediction; for a control unit it is the treated-arm prediction
minus its observed outcome. A cost-complexity pruned regression tree on the
prediction-set TCDs proposes the subgroups; node means with bootstrap standard
errors feed the stability gate.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.tree import DecisionTreeRegressor

from .cohort import CohortTable, CovariateSchema
from .errors import ConfigError, DataError
from .rules import Leaf, PartitionRuleTree, Predicate, Split
from .seeds import derive_seed, stream


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    min_node_size: int = 5
    max_depth: int | None = None
    m_try: int | None = None  # None: all variables
    bootstrap: bool = True

    def as_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "min_node_size": self.min_node_size,
            "max_depth": self.max_depth,
            "m_try": self.m_try,
            "bootstrap": self.bootstrap,
        }


def default_grid(p: int) -> list[ForestParams]:
    m_opts = sorted({math.ceil(math.sqrt(p)), max(1, math.ceil(p / 3))})
    return [
        ForestParams(n_trees=t, min_node_size=s, max_depth=d, m_try=m)
        for t, s, d, m in itertools.product((200, 500), (5, 25, 100), (8, None), m_opts)
    ]


def encode(table: CohortTable) -> tuple[np.ndarray, list[tuple[str, int | None]]]:
    """Feature matrix for trees: numeric/binary as-is, categoricals one-hot.

    The second value maps each column to ``(variable, level index or None)``.
    """
    cols, spec = [], []
    for j, c in enumerate(table.schema.entries):
        x = table.covariates[:, j]
        if c.kind == "categorical":
            for k in range(len(c.levels)):
                cols.append((x == k).astype(float))
                spec.append((c.name, k))
        else:
            cols.append(x)
            spec.append((c.name, None))
    return np.column_stack(cols), spec


@dataclass(eq=False)
class ForestModel:
    params: ForestParams
    arm: int | None
    oob_error: float
    estimator: object  # fitted RandomForestRegressor, or a constant for depth-0 forests
    n_features: int
    constants: np.ndarray | None = None

    @property
    def trees(self) -> list:
        return [] if self.estimator is None else list(self.estimator.estimators_)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.n_features:
            raise DataError(f"forest expects {self.n_features} features, got {X.shape[1]}")
        if self.constants is not None:
            return np.full(len(X), float(np.mean(self.constants)))
        return self.estimator.predict(X)


def _bootstrap_counts(rng: np.random.Generator, n: int, n_trees: int, bootstrap: bool) -> np.ndarray:
    if not bootstrap:
        return np.ones((n_trees, n))
    return np.stack([np.bincount(rng.integers(0, n, n), minlength=n) for _ in range(n_trees)]).astype(float)


def fit_forest(X, y, params: ForestParams, seed: int, arm: int | None = None, workers: int = 1) -> ForestModel:
    """Random regression forest on bootstrap resamples with ``m_try`` variables tried per split.

    A depth-0 forest predicts, per tree, the mean outcome of that tree's
    resample (the full training mean when ``bootstrap`` is off).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        raise DataError("cannot fit a forest on an empty arm")
    if params.n_trees < 1:
        raise ConfigError("n_trees must be at least 1")
    if params.min_node_size > n:
        raise DataError(f"min_node_size {params.min_node_size} exceeds arm size {n}")
    if params.max_depth == 0:
        counts = _bootstrap_counts(stream(seed, "forest-stumps"), n, params.n_trees, params.bootstrap)
        consts = counts @ y / counts.sum(axis=1)
        oob = counts == 0
        pred_sum = (oob * consts[:, None]).sum(axis=0)
        n_oob = oob.sum(axis=0)
        has = n_oob > 0
        oob_err = float(np.mean((y[has] - pred_sum[has] / n_oob[has]) ** 2)) if has.any() else float("nan")
        return ForestModel(params, arm, oob_err, None, X.shape[1], constants=consts)
    rf = RandomForestRegressor(
        n_estimators=params.n_trees,
        min_samples_leaf=params.min_node_size,
        max_depth=params.max_depth,
        max_features=params.m_try if params.m_try is not None else 1.0,
        bootstrap=params.bootstrap,
        random_state=derive_seed(seed, "forest"),
        n_jobs=workers,
    )
    rf.fit(X, y)
    # threaded prediction sums trees in arbitrary order; keep it serial so output is worker-independent
    rf.set_params(n_jobs=1)
    return ForestModel(params, arm, _oob_error(rf, X, y), rf, X.shape[1])


def _oob_error(rf: RandomForestRegressor, X, y) -> float:
    n = len(y)
    if not rf.bootstrap:
        return float("nan")
    total = np.zeros(n)
    count = np.zeros(n)
    for tree, sample in zip(rf.estimators_, rf.estimators_samples_):
        oob = np.ones(n, dtype=bool)
        oob[sample] = False
        if oob.any():
            total[oob] += tree.predict(X[oob])
            count[oob] += 1
    has = count > 0
    if not has.any():
        return float("nan")
    return float(np.mean((y[has] - total[has] / count[has]) ** 2))


def _folds(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    fold = np.empty(n, dtype=np.int64)
    fold[rng.permutation(n)] = np.arange(n) % k
    return fold


@dataclass
class ForestTuning:
    best: ForestParams
    table: list[dict]


def tune_forest(X, y, grid: list[ForestParams], k_folds: int, seed: int, workers: int = 1) -> ForestTuning:
    """K-fold cross-validated choice among ``grid``; ties prefer fewer trees, then larger nodes."""
    if not grid:
        raise ConfigError("forest grid is empty")
    if k_folds < 2:
        raise ConfigError("k_folds must be at least 2")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(grid) == 1:
        return ForestTuning(grid[0], [{**grid[0].as_dict(), "cv_mse": float("nan")}])
    fold = _folds(len(y), k_folds, stream(seed, "forest-cv"))
    rows = []
    best = None
    for g, params in enumerate(grid):
        sq = np.empty(len(y))
        for f in range(k_folds):
            tr, te = fold != f, fold == f
            if params.min_node_size > tr.sum():
                sq[te] = np.inf
                continue
            model = fit_forest(X[tr], y[tr], params, derive_seed(seed, "forest-cv", g, f), workers=workers)
            sq[te] = (y[te] - model.predict(X[te])) ** 2
        mse = float(np.mean(sq))
        rows.append({**params.as_dict(), "cv_mse": mse})
        key = (mse, params.n_trees, -params.min_node_size)
        if best is None or key < best[0]:
            best = (key, params)
    return ForestTuning(best[1], rows)


@dataclass(eq=False)
class TcdRecords:
    """Column-wise treatment-control differences for one source set."""

    unit_id: np.ndarray
    arm: np.ndarray
    observed: np.ndarray
    counterfactual: np.ndarray
    gamma: np.ndarray
    source_set: str

    def __len__(self) -> int:
        return len(self.gamma)

    def rows(self):
        for i in range(len(self)):
            yield {
                "unit_id": self.unit_id[i],
                "arm": int(self.arm[i]),
                "observed_outcome": float(self.observed[i]),
                "counterfactual_prediction": float(self.counterfactual[i]),
                "gamma_hat": float(self.gamma[i]),
                "source_set": self.source_set,
            }


def compute_tcd(
    unit_id, X, y, arm, forest0: ForestModel, forest1: ForestModel, source_set: str, formula: str = "observed"
) -> TcdRecords:
    """Per-unit TCD.

    ``formula="observed"``: treated ``y - mu0(x)``, control ``mu1(x) - y``.
    ``formula="plugin"``: ``mu1(x) - mu0(x)`` for everyone, ignoring outcomes.
    """
    arm = np.asarray(arm)
    if arm.dtype == object or np.any((arm != 0) & (arm != 1)):
        raise DataError("every unit needs an arm flag of 0 or 1")
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    treated = arm == 1
    cf = np.empty(len(y))
    if treated.any():
        cf[treated] = forest0.predict(X[treated])
    if (~treated).any():
        cf[~treated] = forest1.predict(X[~treated])
    if formula == "observed":
        gamma = np.where(treated, y - cf, cf - y)
    elif formula == "plugin":
        mu1 = forest1.predict(X)
        mu0 = forest0.predict(X)
        gamma = mu1 - mu0
    else:
        raise ConfigError(f"unknown TCD formula {formula!r}")
    return TcdRecords(np.asarray(unit_id, dtype=object), arm.astype(np.int64), y, cf, gamma, source_set)


def compute_tcd_continuous(unit_id, X, exposure, forest: ForestModel, delta: float, source_set: str = "prediction"):
    """Exposure-shift TCD: prediction at (x, a + delta) minus prediction at (x, a).

    ``forest`` must have been fit with the exposure as the last feature column.
    """
    X = np.asarray(X, dtype=float)
    a = np.asarray(exposure, dtype=float)
    if delta == 0:
        warnings.warn("delta = 0 gives identically zero differences", stacklevel=2)
        gamma = np.zeros(len(a))
        base = forest.predict(np.column_stack([X, a]))
    else:
        base = forest.predict(np.column_stack([X, a]))
        gamma = forest.predict(np.column_stack([X, a + delta])) - base
    arm = np.full(len(a), -1, dtype=np.int64)
    return TcdRecords(np.asarray(unit_id, dtype=object), arm, np.full(len(a), np.nan), base, gamma, source_set)


# CART on TCD -------------------------------------------------------------------


@dataclass(frozen=True)
class CartConfig:
    cv_folds: int = 5
    min_leaf: int = 100
    complexity_grid: tuple[float, ...] | None = None
    max_grid: int = 40
    one_se: bool = True


def _alpha_grid(path_alphas: np.ndarray, max_grid: int) -> np.ndarray:
    a = np.unique(path_alphas[path_alphas >= 0])
    if len(a) == 0:
        return np.array([0.0])
    # geometric midpoints between consecutive path alphas, as in rpart
    mids = np.sqrt(a[:-1] * a[1:]) if len(a) > 1 else np.array([])
    grid = np.unique(np.concatenate([[0.0], mids, [a[-1] * 1.01]]))
    if len(grid) > max_grid:
        grid = grid[np.unique(np.round(np.linspace(0, len(grid) - 1, max_grid)).astype(int))]
    return grid


@dataclass
class CartFit:
    tree: PartitionRuleTree
    alpha: float
    cv_table: list[dict] = field(default_factory=list)


def grow_tcd_tree(gamma, table: CohortTable, config: CartConfig, seed: int) -> CartFit:
    """Regression CART of ``gamma`` on the covariates of ``table``, pruned by k-fold CV.

    The pruning level is the largest complexity whose CV error is within one
    standard error of the minimum (``one_se``) or the minimizer itself.
    """
    gamma = np.asarray(gamma, dtype=float)
    if len(gamma) == 0:
        raise DataError("no prediction-set records")
    X, spec = encode(table)
    meta = {"method": "tcd_cart", "min_leaf": config.min_leaf}
    if np.ptp(gamma) == 0 or len(gamma) < 2 * config.min_leaf:
        return CartFit(PartitionRuleTree(Leaf(), table.schema, meta), float("inf"))
    rs = derive_seed(seed, "cart")
    base = DecisionTreeRegressor(min_samples_leaf=config.min_leaf, random_state=rs)
    if config.complexity_grid is not None:
        grid = np.array(sorted(config.complexity_grid))
    else:
        grid = _alpha_grid(base.cost_complexity_pruning_path(X, gamma).ccp_alphas, config.max_grid)
    fold = _folds(len(gamma), config.cv_folds, stream(seed, "cart-cv"))
    sq = np.empty((len(grid), len(gamma)))
    for f in range(config.cv_folds):
        tr, te = fold != f, fold == f
        for g, a in enumerate(grid):
            m = DecisionTreeRegressor(min_samples_leaf=config.min_leaf, ccp_alpha=a, random_state=rs)
            m.fit(X[tr], gamma[tr])
            sq[g, te] = (gamma[te] - m.predict(X[te])) ** 2
    err = sq.mean(axis=1)
    se = sq.std(axis=1, ddof=1) / np.sqrt(len(gamma))
    k = int(np.argmin(err))
    if config.one_se:
        ok = np.nonzero(err <= err[k] + se[k])[0]
        k = int(ok.max())
    alpha = float(grid[k])
    final = DecisionTreeRegressor(min_samples_leaf=config.min_leaf, ccp_alpha=alpha, random_state=rs)
    final.fit(X, gamma)
    root = sklearn_to_rules(final, spec, table.schema)
    cv_table = [{"ccp_alpha": float(a), "cv_error": float(e), "cv_se": float(s)} for a, e, s in zip(grid, err, se)]
    meta["ccp_alpha"] = alpha
    return CartFit(PartitionRuleTree(root, table.schema, meta), alpha, cv_table)


def sklearn_to_rules(model: DecisionTreeRegressor, spec, schema: CovariateSchema):
    """Translate a fitted sklearn regression tree to rule nodes.

    A split on a one-hot column ``level == k`` (threshold 0.5, left = indicator
    off) becomes ``var in (levels seen on this path, minus k)``.
    """
    t = model.tree_

    def build(node: int, allowed: dict):
        if t.children_left[node] == -1:
            return Leaf(metadata={"cart_value": float(t.value[node].ravel()[0]), "cart_n": int(t.n_node_samples[node])})
        var, level = spec[t.feature[node]]
        if level is None:
            pred = Predicate.le(var, float(t.threshold[node]))
            left_allowed = right_allowed = allowed
        else:
            cov = schema[var]
            cur = allowed.get(var, set(range(len(cov.levels))))
            keep = sorted(cur - {level})
            if not keep or level not in cur:
                # degenerate one-hot split; follow the populated side
                side = t.children_right[node] if not keep else t.children_left[node]
                return build(side, allowed)
            # "var in keep" must be a proper subset of the declared levels
            pred = Predicate.isin(var, [cov.levels[k] for k in keep])
            left_allowed = {**allowed, var: set(keep)}
            right_allowed = {**allowed, var: {level}}
        return Split(pred, build(t.children_left[node], left_allowed), build(t.children_right[node], right_allowed))

    return build(0, {})


# node statistics ---------------------------------------------------------------


@dataclass
class TcdNodeStat:
    leaf_id: int
    mean_gamma: float
    bootstrap_se: float
    n_units: int
    source_set: str


def bootstrap_se(values: np.ndarray, n_bootstrap: int, rng: np.random.Generator) -> float:
    """Standard deviation of resampled means (with replacement)."""
    n = len(values)
    if n < 2:
        return 0.0
    means = np.empty(n_bootstrap)
    step = max(1, 2_000_000 // n)
    for s in range(0, n_bootstrap, step):
        b = min(step, n_bootstrap - s)
        means[s : s + b] = values[rng.integers(0, n, size=(b, n))].mean(axis=1)
    return float(means.std(ddof=1))


def node_stats(records: TcdRecords, leaf_of: np.ndarray, n_leaves: int, n_bootstrap: int, seed: int) -> list[TcdNodeStat]:
    """Mean TCD and bootstrap SE per leaf. Leaves without records are omitted."""
    out = []
    for lf in range(n_leaves):
        g = records.gamma[leaf_of == lf]
        if len(g) == 0:
            continue
        rng = stream(seed, "node-bootstrap", records.source_set, lf)
        out.append(
            TcdNodeStat(lf, float(np.sum(g) / len(g)), bootstrap_se(g, n_bootstrap, rng), len(g), records.source_set)
        )
    return out
