"""Model-based recursive partitioning of the treatment-outcome regression.

At every node an OLS fit of ``outcome ~ treatment (+ adjustment covariates)``
is computed; the intercept and treatment score columns are tested for
correlation with each partitioning variable by permutation, Bonferroni
corrected over all 2J pairs. If any pair rejects, the variable with the
largest statistic among the rejected pairs is split at the cut point that
minimizes the summed residual sum of squares of the two child fits.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import CohortTable
from .errors import ConfigError, DataError, RankDeficientError
from .glm import design_matrix, fit_ols
from .rules import Leaf, PartitionRuleTree, Predicate, Split
from .seeds import stream

SCORE_NAMES = ("beta0", "beta1")


@dataclass(frozen=True)
class MobConfig:
    alpha: float = 0.05
    min_cluster_size: int = 1000
    max_depth: int | None = 6
    n_permutations: int = 999
    candidate_variables: tuple[str, ...] | None = None
    seed: int = 0
    adjust: tuple[str, ...] = ()
    transform: str = "identity"
    max_candidates: int = 512

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_permutations < 199:
            raise ConfigError("n_permutations must be at least 199")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be nonnegative")
        n_coef = 2 + len(self.adjust)
        if self.min_cluster_size < 2 * n_coef:
            raise ConfigError(f"min_cluster_size must be at least {2 * n_coef}")


@dataclass
class InstabilityEntry:
    variable: str
    score: str
    statistic: float
    p_value: float


@dataclass
class InstabilityReport:
    n: int
    tested: bool
    entries: list[InstabilityEntry] = field(default_factory=list)
    selected_variable: str | None = None


def _candidates(table: CohortTable, config: MobConfig) -> list[str]:
    names = table.schema.names if config.candidate_variables is None else list(config.candidate_variables)
    for v in names:
        if v not in table.schema:
            raise ConfigError(f"candidate variable {v!r} not in schema")
    return names


def _standardize(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = a - a.mean(axis=0)
    sd = np.sqrt(np.mean(a**2, axis=0))
    ok = sd > 1e-12 * np.maximum(1.0, np.max(np.abs(a), axis=0, initial=0.0))
    out = np.zeros_like(a)
    out[:, ok] = a[:, ok] / sd[ok]
    return out, ok


def _partition_columns(table: CohortTable, variables: list[str]):
    cols, owner = [], []
    for j, v in enumerate(variables):
        cov = table.schema[v]
        x = table.column(v)
        if cov.kind == "categorical":
            for k in range(len(cov.levels)):
                cols.append((x == k).astype(float))
                owner.append(j)
        else:
            cols.append(x)
            owner.append(j)
    return np.column_stack(cols), np.array(owner)


def _per_variable_max(corr: np.ndarray, owner: np.ndarray, n_vars: int) -> np.ndarray:
    # corr: (..., M, 2) absolute correlations -> (..., J, 2)
    out = np.zeros(corr.shape[:-2] + (n_vars, corr.shape[-1]))
    for j in range(n_vars):
        out[..., j, :] = corr[..., owner == j, :].max(axis=-2)
    return out


def instability_test(
    scores: np.ndarray, table: CohortTable, config: MobConfig, rng: np.random.Generator
) -> InstabilityReport:
    """Permutation test of independence between the first two score columns and each partitioning variable.

    The statistic for a numeric variable is the absolute Pearson correlation; for a
    categorical variable it is the largest absolute correlation with any level
    indicator. A constant variable scores 0 and is never selected.
    """
    n = len(table)
    variables = _candidates(table, config)
    if n < 2 * config.min_cluster_size:
        return InstabilityReport(n=n, tested=False)
    n_tests = 2 * len(variables)
    floor = n_tests / (config.n_permutations + 1)
    if floor > config.alpha:
        warnings.warn(
            f"with {config.n_permutations} permutations and {n_tests} tests the smallest adjusted "
            f"p-value is {floor:.3g} > alpha; no split can be selected",
            stacklevel=2,
        )
    s, s_ok = _standardize(np.asarray(scores, dtype=float)[:, :2])
    zcols, owner = _partition_columns(table, variables)
    z, _ = _standardize(zcols)
    obs = _per_variable_max(np.abs(z.T @ s) / n, owner, len(variables))
    obs[:, ~s_ok] = 0.0

    exceed = np.zeros_like(obs)
    chunk = max(1, min(config.n_permutations, 4_000_000 // max(n, 1)))
    done = 0
    tol = 1e-12
    while done < config.n_permutations:
        c = min(chunk, config.n_permutations - done)
        perms = np.stack([rng.permutation(n) for _ in range(c)])
        sp = s[perms]  # (c, n, 2)
        corr = np.abs(np.matmul(z.T[None, :, :], sp)) / n
        stat = _per_variable_max(corr, owner, len(variables))
        exceed += np.sum(stat >= obs[None] - tol, axis=0)
        done += c
    p_raw = (1.0 + exceed) / (config.n_permutations + 1.0)
    p_adj = np.minimum(1.0, p_raw * n_tests)
    p_adj[obs == 0] = 1.0

    entries = [
        InstabilityEntry(v, SCORE_NAMES[c], float(obs[j, c]), float(p_adj[j, c]))
        for j, v in enumerate(variables)
        for c in range(2)
    ]
    rejected = (p_adj < config.alpha) & (obs > 0)
    selected = None
    if rejected.any():
        masked = np.where(rejected, obs, -1.0)
        j = int(np.unravel_index(np.argmax(masked), masked.shape)[0])
        selected = variables[j]
    return InstabilityReport(n=n, tested=True, entries=entries, selected_variable=selected)


@dataclass
class Cut:
    variable: str
    objective: float
    threshold: float | None = None
    levels: tuple[str, ...] = ()

    def predicate(self) -> Predicate:
        if self.threshold is not None:
            return Predicate.le(self.variable, self.threshold)
        return Predicate.isin(self.variable, self.levels)


def _batched_rss(xx, xy, yy):
    # xx (m,k,k), xy (m,k), yy (m,) -> RSS per row; inf where ill-conditioned
    out = np.full(len(yy), np.inf)
    if len(yy) == 0:
        return out
    cond = np.linalg.cond(xx)
    ok = np.isfinite(cond) & (cond < 1e12)
    if ok.any():
        b = np.linalg.solve(xx[ok], xy[ok][..., None])[..., 0]
        out[ok] = yy[ok] - np.einsum("mk,mk->m", b, xy[ok])
    return np.maximum(out, 0.0)


def _suff(X, y):
    return X[:, :, None] * X[:, None, :], X * y[:, None], y * y


def find_cutpoint(
    X: np.ndarray,
    y: np.ndarray,
    table: CohortTable,
    variable: str,
    min_size: int,
    max_candidates: int = 512,
    residuals: np.ndarray | None = None,
) -> Cut | None:
    """Best binary split of ``variable`` under the two-child RSS objective.

    Numeric variables: candidate cut points are midpoints between consecutive
    distinct values (thinned to ``max_candidates`` evenly spaced ones), each child
    keeping at least ``min_size`` units; ties go to the smallest cut point.
    Categorical variables: all binary partitions of the present levels when there
    are at most 10, otherwise contiguous cuts of the levels ordered by their mean
    ``residuals``. Returns ``None`` if no split is admissible.
    """
    n = len(y)
    # the model has an intercept, so centering leaves every RSS unchanged
    Xc = X.copy()
    Xc[:, 1:] -= X[:, 1:].mean(axis=0)
    yc = y - y.mean()
    xx, xy, yy = _suff(Xc, yc)
    cov = table.schema[variable]
    z = table.column(variable)

    if cov.kind != "categorical":
        order = np.argsort(z, kind="stable")
        zs = z[order]
        cxx, cxy, cyy = (np.cumsum(a[order], axis=0) for a in (xx, xy, yy))
        pos = np.nonzero(zs[:-1] < zs[1:])[0]
        pos = pos[(pos + 1 >= min_size) & (n - pos - 1 >= min_size)]
        if len(pos) == 0:
            return None
        if len(pos) > max_candidates:
            pos = pos[np.unique(np.round(np.linspace(0, len(pos) - 1, max_candidates)).astype(int))]
        left = _batched_rss(cxx[pos], cxy[pos], cyy[pos])
        right = _batched_rss(cxx[-1] - cxx[pos], cxy[-1] - cxy[pos], cyy[-1] - cyy[pos])
        obj = left + right
        if not np.isfinite(obj).any():
            return None
        best = np.min(obj)
        k = int(np.nonzero(obj <= best + 1e-12 * max(abs(best), 1.0))[0][0])
        i = pos[k]
        return Cut(variable, float(obj[k]), threshold=float((zs[i] + zs[i + 1]) / 2))

    codes = z.astype(np.int64)
    present = [k for k in range(len(cov.levels)) if np.any(codes == k)]
    if len(present) < 2:
        return None
    stats = {k: tuple(a[codes == k].sum(axis=0) for a in (xx, xy, yy)) for k in present}
    counts = {k: int(np.sum(codes == k)) for k in present}
    if len(present) <= 10:
        first, rest = present[0], present[1:]
        groups = []
        for r in range(0, len(rest)):
            for combo in itertools.combinations(rest, r):
                groups.append((first,) + combo)
    else:
        res = residuals if residuals is not None else yc
        means = sorted(present, key=lambda k: (float(np.mean(res[codes == k])), k))
        groups = [tuple(means[: i + 1]) for i in range(len(means) - 1)]
    best = None
    for g in groups:
        n_left = sum(counts[k] for k in g)
        if n_left < min_size or n - n_left < min_size:
            continue
        lxx, lxy, lyy = (sum(stats[k][m] for k in g) for m in range(3))
        txx, txy, tyy = (sum(stats[k][m] for k in present) for m in range(3))
        rss = _batched_rss(np.stack([lxx, txx - lxx]), np.stack([lxy, txy - lxy]), np.array([lyy, tyy - lyy]))
        obj = float(rss.sum())
        if np.isfinite(obj) and (best is None or obj < best[0] - 1e-12 * max(abs(best[0]), 1.0)):
            best = (obj, g)
    if best is None:
        return None
    levels = tuple(cov.levels[k] for k in sorted(best[1]))
    return Cut(variable, best[0], levels=levels)


def _leaf_metadata(fit, names) -> dict:
    return {
        "train_estimate": fit.coef("treatment"),
        "train_se": fit.se("treatment"),
        "n_train": fit.n_obs,
        "coefficients": {nm: float(c) for nm, c in zip(names, fit.coefficients)},
    }


def grow(table: CohortTable, config: MobConfig, diagnostics: list | None = None) -> PartitionRuleTree:
    """Grow a partition tree on ``table`` (the training split).

    Every node gets a fresh OLS fit; leaves keep the treatment coefficient and its
    model-based standard error. If ``diagnostics`` is a list, one row per tested
    (node, variable, score) pair is appended to it.
    """
    if len(table) == 0:
        raise DataError("empty training set")
    _candidates(table, config)

    def node(idx: np.ndarray, depth: int, node_index: int):
        sub = table.subset(idx)
        X, y, names = design_matrix(sub, config.adjust, config.transform)
        fit = fit_ols(X, y, names)
        leaf = Leaf(metadata=_leaf_metadata(fit, names))
        if config.max_depth is not None and depth >= config.max_depth:
            return leaf
        rng = stream(config.seed, "mob", node_index)
        report = instability_test(fit.score_matrix, sub, config, rng)
        if diagnostics is not None:
            for e in report.entries:
                diagnostics.append(
                    {
                        "node": node_index,
                        "depth": depth,
                        "n": report.n,
                        "variable": e.variable,
                        "score": e.score,
                        "statistic": e.statistic,
                        "p_adjusted": e.p_value,
                        "selected": int(e.variable == report.selected_variable),
                    }
                )
        if report.selected_variable is None:
            return leaf
        cut = find_cutpoint(
            X, y, sub, report.selected_variable, config.min_cluster_size, config.max_candidates, fit.residuals
        )
        parent_rss = float(fit.residuals @ fit.residuals)
        if cut is None or not cut.objective < parent_rss:
            return leaf
        pred = cut.predicate()
        z = sub.column(cut.variable)
        if pred.form == "threshold":
            go_left = z <= pred.threshold
        else:
            cov = table.schema[cut.variable]
            go_left = np.isin(z.astype(np.int64), [cov.levels.index(v) for v in pred.levels])
        try:
            left = node(idx[go_left], depth + 1, 2 * node_index)
            right = node(idx[~go_left], depth + 1, 2 * node_index + 1)
        except RankDeficientError:
            return leaf
        return Split(pred, left, right)

    root = node(np.arange(len(table)), 0, 1)
    meta = {
        "method": "mob",
        "alpha": config.alpha,
        "min_cluster_size": config.min_cluster_size,
        "adjust": list(config.adjust),
        "transform": config.transform,
    }
    return PartitionRuleTree(root, table.schema, meta)


def predict(tree: PartitionRuleTree, table: CohortTable) -> np.ndarray:
    """Leaf-wise fitted values of the transformed outcome for the rows of ``table``."""
    adjust = tuple(tree.metadata.get("adjust", ()))
    X, _, names = design_matrix(table, adjust, tree.metadata.get("transform", "identity"))
    leaf_of = tree.assign(table)
    out = np.empty(len(table))
    for lf in tree.leaves:
        m = leaf_of == lf.leaf_id
        coefs = lf.metadata["coefficients"]
        out[m] = X[m] @ np.array([coefs[nm] for nm in names])
    return out


@dataclass
class TuneResult:
    feature_set: tuple[str, ...]
    min_size: int
    scores: list[dict]
    tree: PartitionRuleTree


def tune(
    table: CohortTable,
    feature_sets,
    min_sizes,
    config: MobConfig,
    train_label: str = "train",
    validation_label: str = "validation",
) -> TuneResult:
    """Choose the (feature set, minimum cluster size) pair with the lowest validation MSE.

    Ties prefer the smaller feature set, then the larger minimum size.
    """
    combos = [(tuple(fs), int(m)) for fs in feature_sets for m in min_sizes]
    if not combos:
        raise ConfigError("tune needs at least one candidate combination")
    train = table.part(train_label)
    val = table.part(validation_label) if len(combos) > 1 else None
    scores = []
    best = None
    for fs, m in combos:
        cfg = replace(config, candidate_variables=fs, min_cluster_size=m)
        tree = grow(train, cfg)
        if val is not None:
            y = design_matrix(val, cfg.adjust, cfg.transform)[1]
            mse = float(np.mean((y - predict(tree, val)) ** 2))
        else:
            mse = float("nan")
        scores.append({"feature_set": list(fs), "min_size": m, "validation_mse": mse, "n_leaves": tree.n_leaves})
        key = (mse if val is not None else 0.0, len(fs), -m)
        if best is None or key < best[0]:
            best = (key, fs, m, tree)
    _, fs, m, tree = best
    return TuneResult(fs, m, scores, tree)
