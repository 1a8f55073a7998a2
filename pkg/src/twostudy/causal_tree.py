"""Honest causal tree trained on experimental data alone.

The training units are split in two. The *split* half chooses the partition by
maximizing the honest expected-MSE criterion

    sum over leaves  n_l * tau_l^2 / N_s  -  (1/N_s + 1/N_e) * (S1_l^2 / p + S0_l^2 / (1 - p))

and the *estimation* half supplies the leaf effects (difference of arm means).
The grown tree is pruned by cost complexity, the level picked by k-fold
cross-validation on the split half.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cohort import CohortTable
from .errors import ConfigError, DataError
from .glm import transform_outcome
from .rules import Leaf, PartitionRuleTree, Predicate, Split
from .seeds import stream
from .stability import STABLE_HIGH, StabilityVerdict, gate_tree
from .study2 import _periods, build_indicator, indicator_from_firms


@dataclass(frozen=True)
class CausalTreeConfig:
    min_leaf: int = 25  # per arm, in both honest halves
    honest_fraction: float = 0.5
    cv_folds: int = 5
    max_depth: int = 6
    max_candidates: int = 64
    max_grid: int = 30
    one_se: bool = True

    def __post_init__(self):
        if self.min_leaf < 2:
            raise ConfigError("min_leaf must be at least 2")
        if not 0 < self.honest_fraction < 1:
            raise ConfigError("honest_fraction must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")


def first_differences(panel: CohortTable, threshold: float | None = None, transform: str = "log1p") -> CohortTable:
    """One row per unit: first-period covariates, arm from the treatment indicator,
    outcome = T(y_last) - T(y_first). Units with indicator -1 are dropped."""
    pre, post = _periods(panel)
    ind = build_indicator(panel, threshold) if threshold is not None else indicator_from_firms(panel)
    b = ind.as_dict()
    y = transform_outcome(panel.outcome, transform)
    y_pre = {u: v for u, v, p in zip(panel.unit_id, y, panel.period) if p == pre}
    y_post = {u: v for u, v, p in zip(panel.unit_id, y, panel.period) if p == post}
    base = panel.subset((panel.period == pre) & np.array([b.get(u, -1) in (0, 1) for u in panel.unit_id]))
    missing = [u for u in base.unit_id if u not in y_post]
    if missing:
        raise DataError(f"unit {missing[0]!r} is missing the last period")
    diff = np.array([y_post[u] - y_pre[u] for u in base.unit_id])
    arm = np.array([b[u] for u in base.unit_id], dtype=np.int8)
    return base.replace(outcome=diff, arm=arm, period=None, firm_group=None)


# node statistics ----------------------------------------------------------------


@dataclass
class _Node:
    rows_s: np.ndarray  # split-half rows
    rows_e: np.ndarray  # estimation-half rows
    value: float  # leaf contribution to the criterion
    depth: int
    predicate: Predicate | None = None
    left: "_Node | None" = None
    right: "_Node | None" = None
    # filled by pruning
    subtree_value: float = 0.0
    n_leaves: int = 1

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _arm_moments(y, arm):
    out = []
    for a in (0, 1):
        v = y[arm == a]
        n = len(v)
        out.append((n, v.mean() if n else 0.0, v.var(ddof=1) if n > 1 else 0.0))
    return out


def effect(y, arm) -> tuple[float, float, int, int]:
    """Difference of arm means with its Welch standard error."""
    (n0, m0, v0), (n1, m1, v1) = _arm_moments(y, arm)
    if n0 < 2 or n1 < 2:
        return float("nan"), float("nan"), n1, n0
    return float(m1 - m0), float(np.sqrt(v1 / n1 + v0 / n0)), n1, n0


class _Grower:
    def __init__(self, Xs, ys, arm_s, Xe, arm_e, schema, config: CausalTreeConfig):
        self.Xs, self.ys, self.arm_s = Xs, ys, arm_s
        self.Xe, self.arm_e = Xe, arm_e
        self.schema = schema
        self.cfg = config
        self.Ns, self.Ne = len(ys), len(arm_e)
        self.p = float(np.mean(arm_s))
        self.pen = 1.0 / self.Ns + 1.0 / self.Ne

    def _value(self, n, n1, s1, q1, n0, s0, q0):
        """Criterion contribution of a leaf from per-arm count, sum and sum of squares (vectorised)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            m1, m0 = s1 / n1, s0 / n0
            v1 = (q1 - n1 * m1**2) / (n1 - 1)
            v0 = (q0 - n0 * m0**2) / (n0 - 1)
            return n * (m1 - m0) ** 2 / self.Ns - self.pen * (v1 / self.p + v0 / (1 - self.p))

    def node_value(self, rows):
        y, a = self.ys[rows], self.arm_s[rows]
        n1 = float(a.sum())
        n0 = len(a) - n1
        return float(
            self._value(len(a), n1, y[a == 1].sum(), (y[a == 1] ** 2).sum(), n0, y[a == 0].sum(), (y[a == 0] ** 2).sum())
        )

    def _ordered(self, j, rows_s, rows_e, allowed):
        """Per-variable ordering key for both halves; categoricals ranked by arm contrast."""
        cov = self.schema.entries[j]
        xs, xe = self.Xs[rows_s, j], self.Xe[rows_e, j]
        if cov.kind != "categorical":
            return xs, xe, None
        levels = sorted(allowed)
        y, a = self.ys[rows_s], self.arm_s[rows_s]
        score = {}
        for k in levels:
            m = xs == k
            t, c = y[m & (a == 1)], y[m & (a == 0)]
            score[k] = (t.mean() - c.mean()) if len(t) and len(c) else np.inf
        order = sorted(levels, key=lambda k: (score[k], k))
        rank = np.full(len(cov.levels), len(levels), dtype=float)
        for r, k in enumerate(order):
            rank[k] = r
        return rank[xs.astype(int)], rank[xe.astype(int)], order

    def best_split(self, node: _Node, allowed: dict):
        cfg = self.cfg
        best = None
        for j, cov in enumerate(self.schema.entries):
            lv = allowed.get(j, set(range(len(cov.levels)))) if cov.kind == "categorical" else None
            if lv is not None and len(lv) < 2:
                continue
            xs, xe, order = self._ordered(j, node.rows_s, node.rows_e, lv)
            o = np.argsort(xs, kind="stable")
            xs_o = xs[o]
            y = self.ys[node.rows_s][o]
            a = self.arm_s[node.rows_s][o].astype(float)
            uniq = np.unique(xs_o)
            if len(uniq) < 2:
                continue
            cuts = (uniq[:-1] + uniq[1:]) / 2
            if len(cuts) > cfg.max_candidates:
                cuts = np.unique(np.quantile(cuts, np.linspace(0, 1, cfg.max_candidates), method="nearest"))
            pos = np.searchsorted(xs_o, cuts, side="right")
            c1 = np.concatenate([[0.0], np.cumsum(a)])[pos]
            cn = pos.astype(float)
            cs1 = np.concatenate([[0.0], np.cumsum(a * y)])[pos]
            cq1 = np.concatenate([[0.0], np.cumsum(a * y * y)])[pos]
            cs = np.concatenate([[0.0], np.cumsum(y)])[pos]
            cq = np.concatenate([[0.0], np.cumsum(y * y)])[pos]
            T1, Tn, TS1, TQ1, TS, TQ = a.sum(), len(a), (a * y).sum(), (a * y * y).sum(), y.sum(), (y * y).sum()
            c0 = cn - c1
            left = self._value(cn, c1, cs1, cq1, c0, cs - cs1, cq - cq1)
            r1, rn = T1 - c1, Tn - cn
            r0 = rn - r1
            right = self._value(rn, r1, TS1 - cs1, TQ1 - cq1, r0, (TS - TS1) - (cs - cs1), (TQ - TQ1) - (cq - cq1))
            # honest size constraint on both halves
            ae = self.arm_e[node.rows_e]
            e1 = np.sort(xe[ae == 1])
            e0 = np.sort(xe[ae == 0])
            le1, le0 = np.searchsorted(e1, cuts, side="right"), np.searchsorted(e0, cuts, side="right")
            m = cfg.min_leaf
            ok = (c1 >= m) & (c0 >= m) & (r1 >= m) & (r0 >= m)
            ok &= (le1 >= m) & (le0 >= m) & (len(e1) - le1 >= m) & (len(e0) - le0 >= m)
            gain = np.where(ok, left + right - node.value, -np.inf)
            k = int(np.argmax(gain))
            if not np.isfinite(gain[k]):
                continue
            if best is None or gain[k] > best[0]:
                best = (float(gain[k]), j, float(cuts[k]), order, float(left[k]), float(right[k]))
        return best

    def grow(self, rows_s, rows_e, depth=0, allowed=None) -> _Node:
        allowed = allowed or {}
        node = _Node(rows_s, rows_e, self.node_value(rows_s), depth)
        if depth >= self.cfg.max_depth:
            return node
        best = self.best_split(node, allowed)
        if best is None or best[0] <= 0:
            return node
        _, j, cut, order, _, _ = best
        cov = self.schema.entries[j]
        if cov.kind == "categorical":
            n_left = int(np.floor(cut)) + 1
            left_lv = set(order[:n_left])
            right_lv = set(allowed.get(j, set(range(len(cov.levels))))) - left_lv
            node.predicate = Predicate.isin(cov.name, [cov.levels[k] for k in sorted(left_lv)])
            go_s = np.isin(self.Xs[rows_s, j], sorted(left_lv))
            go_e = np.isin(self.Xe[rows_e, j], sorted(left_lv))
            la, ra = {**allowed, j: left_lv}, {**allowed, j: right_lv}
        else:
            node.predicate = Predicate.le(cov.name, cut)
            go_s, go_e = self.Xs[rows_s, j] <= cut, self.Xe[rows_e, j] <= cut
            la = ra = allowed
        node.left = self.grow(rows_s[go_s], rows_e[go_e], depth + 1, la)
        node.right = self.grow(rows_s[~go_s], rows_e[~go_e], depth + 1, ra)
        return node


# cost-complexity pruning --------------------------------------------------------


def _annotate(node: _Node) -> None:
    if node.is_leaf:
        node.subtree_value, node.n_leaves = node.value, 1
        return
    _annotate(node.left)
    _annotate(node.right)
    node.subtree_value = node.left.subtree_value + node.right.subtree_value
    node.n_leaves = node.left.n_leaves + node.right.n_leaves


def _internal(node: _Node):
    if not node.is_leaf:
        yield node
        yield from _internal(node.left)
        yield from _internal(node.right)


def _pruning_path(root: _Node) -> list[float]:
    """Complexity levels at which weakest-link pruning removes a split."""
    t = _clone(root)
    path = []
    while not t.is_leaf:
        _annotate(t)
        g = min((n.subtree_value - n.value) / (n.n_leaves - 1) for n in _internal(t))
        path.append(max(g, 0.0))
        for n in list(_internal(t)):
            if (n.subtree_value - n.value) / (n.n_leaves - 1) <= g + 1e-15:
                n.left = n.right = None
                n.predicate = None
    return path


def _clone(node: _Node) -> _Node:
    c = _Node(node.rows_s, node.rows_e, node.value, node.depth, node.predicate)
    if not node.is_leaf:
        c.left, c.right = _clone(node.left), _clone(node.right)
    return c


def prune(root: _Node, lam: float) -> _Node:
    """Smallest subtree maximizing criterion minus ``lam`` per leaf."""
    t = _clone(root)

    def walk(n: _Node) -> tuple[float, int]:
        if n.is_leaf:
            return n.value, 1
        lv, ll = walk(n.left)
        rv, rl = walk(n.right)
        if lv + rv - lam * (ll + rl) <= n.value - lam:
            n.left = n.right = None
            n.predicate = None
            return n.value, 1
        return lv + rv, ll + rl

    walk(t)
    return t


def _leaf_index(node: _Node, X: np.ndarray, schema) -> np.ndarray:
    """Position (left-to-right) of each row's leaf."""
    out = np.zeros(len(X), dtype=int)
    counter = [0]

    def walk(n: _Node, rows: np.ndarray):
        if n.is_leaf:
            out[rows] = counter[0]
            counter[0] += 1
            return
        p = n.predicate
        j = schema.index(p.variable)
        if p.form == "subset":
            cov = schema.entries[j]
            codes = [cov.levels.index(v) for v in p.levels]
            go = np.isin(X[rows, j], codes)
        else:
            go = X[rows, j] <= p.threshold
        walk(n.left, rows[go])
        walk(n.right, rows[~go])

    walk(node, np.arange(len(X)))
    return out


def _to_rules(node: _Node):
    if node.is_leaf:
        return Leaf()
    return Split(node.predicate, _to_rules(node.left), _to_rules(node.right))


def _lambda_grid(path: list[float], max_grid: int) -> np.ndarray:
    a = np.unique(np.asarray(path, dtype=float))
    if len(a) == 0:
        return np.array([0.0])
    pos = a[a > 0]
    mids = np.sqrt(pos[:-1] * pos[1:]) if len(pos) > 1 else np.array([])
    grid = np.unique(np.concatenate([[0.0], mids, [a[-1] * 1.01 + 1e-12]]))
    if len(grid) > max_grid:
        grid = grid[np.unique(np.round(np.linspace(0, len(grid) - 1, max_grid)).astype(int))]
    return grid


# public API ---------------------------------------------------------------------


@dataclass
class CausalTreeModel:
    tree: PartitionRuleTree
    split_ids: np.ndarray
    estimation_ids: np.ndarray
    leaf_effects: dict[int, tuple[float, float]]  # leaf_id -> (tau, se) on the estimation half
    leaf_counts: dict[int, tuple[int, int]]  # leaf_id -> (n_treated, n_control)
    complexity: float
    cv_table: list[dict] = field(default_factory=list)


def honest_effects(tree: PartitionRuleTree, estimation: CohortTable) -> tuple[dict, dict]:
    """Leaf effects recomputed from ``estimation`` alone."""
    leaf_of = tree.assign(estimation)
    effects, counts = {}, {}
    for lf in tree.leaves:
        m = leaf_of == lf.leaf_id
        tau, se, n1, n0 = effect(estimation.outcome[m], estimation.arm[m])
        counts[lf.leaf_id] = (n1, n0)
        if np.isfinite(tau):
            effects[lf.leaf_id] = (tau, se)
    return effects, counts


def _honest_halves(table: CohortTable, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of split-half rows, stratified by arm."""
    rng = stream(seed, "causal-tree", "honest")
    mask = np.zeros(len(table), dtype=bool)
    for a in (0, 1):
        idx = np.nonzero(table.arm == a)[0]
        idx = idx[np.argsort(table.unit_id[idx].astype(str), kind="stable")]
        pick = rng.permutation(len(idx))[: int(round(fraction * len(idx)))]
        mask[idx[pick]] = True
    return mask


def _cv_loss(tr_s, te_s, Xe, arm_e, grid, schema, cfg, X, y, arm) -> np.ndarray:
    """Held-out loss sum n_l (tau_tr^2 - 2 tau_tr tau_te) for each complexity level."""
    g = _Grower(X[tr_s], y[tr_s], arm[tr_s], Xe, arm_e, schema, cfg)
    root = g.grow(np.arange(len(g.ys)), np.arange(len(arm_e)))
    Xte, yte, ate = X[te_s], y[te_s], arm[te_s]
    out = np.empty(len(grid))
    for i, lam in enumerate(grid):
        t = prune(root, lam)
        lt = _leaf_index(t, g.Xs, schema)
        lv = _leaf_index(t, Xte, schema)
        loss = 0.0
        for leaf in np.unique(lv):
            mt, mv = lt == leaf, lv == leaf
            tau_tr = effect(g.ys[mt], g.arm_s[mt])[0]
            tau_te = effect(yte[mv], ate[mv])[0]
            if np.isfinite(tau_tr) and np.isfinite(tau_te):
                loss += mv.sum() * (tau_tr**2 - 2 * tau_tr * tau_te)
        out[i] = loss
    return out


def fit_causal_tree(train: CohortTable, config: CausalTreeConfig | None = None, seed: int = 0, workers: int = 1) -> CausalTreeModel:
    cfg = config or CausalTreeConfig()
    if train.arm is None:
        raise DataError("causal tree needs a binary arm column")
    arm = np.asarray(train.arm, dtype=int)
    if not (np.any(arm == 1) and np.any(arm == 0)):
        raise DataError("both arms must be non-empty")
    smask = _honest_halves(train, cfg.honest_fraction, seed)
    S, E = train.subset(smask), train.subset(~smask)
    X, y, a = S.covariates, S.outcome, S.arm.astype(int)
    Xe, ae = E.covariates, E.arm.astype(int)
    schema = train.schema
    meta = {"method": "causal_tree", "min_leaf": cfg.min_leaf, "honest_fraction": cfg.honest_fraction}

    grower = _Grower(X, y, a, Xe, ae, schema, cfg)
    full = grower.grow(np.arange(len(y)), np.arange(len(ae)))
    grid = _lambda_grid(_pruning_path(full), cfg.max_grid)

    fold = np.empty(len(y), dtype=int)
    rng = stream(seed, "causal-tree", "cv")
    for arm_v in (0, 1):
        idx = np.nonzero(a == arm_v)[0]
        fold[idx[rng.permutation(len(idx))]] = np.arange(len(idx)) % cfg.cv_folds

    def run(f):
        return _cv_loss(fold != f, fold == f, Xe, ae, grid, schema, cfg, X, y, a)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(run, range(cfg.cv_folds)))
    else:
        losses = [run(f) for f in range(cfg.cv_folds)]
    losses = np.asarray(losses)
    total = losses.sum(axis=0)
    k = int(np.argmin(total))
    # largest complexity within one standard error of the best (or tied with it)
    slack = np.sqrt(cfg.cv_folds) * losses[:, k].std(ddof=1) if cfg.one_se else 0.0
    k = int(np.nonzero(total <= total[k] + slack + 1e-12)[0].max())
    lam = float(grid[k])
    final = prune(full, lam)
    meta["complexity"] = lam
    tree = PartitionRuleTree(_to_rules(final), schema, meta)
    effects, counts = honest_effects(tree, E)
    for lf in tree.leaves:
        tau = effects.get(lf.leaf_id)
        lf.metadata.update({"train_estimate": None if tau is None else tau[0], "train_se": None if tau is None else tau[1]})
    cv_table = [{"complexity": float(g), "cv_loss": float(v)} for g, v in zip(grid, total)]
    return CausalTreeModel(tree, S.unit_id.copy(), E.unit_id.copy(), effects, counts, lam, cv_table)


@dataclass
class CausalTreeValidation:
    tree: PartitionRuleTree
    verdicts: list[StabilityVerdict]

    @property
    def n_held(self) -> int:
        return sum(v.label == STABLE_HIGH for v in self.verdicts)

    def summary(self) -> str:
        return f"{self.n_held}/{len(self.verdicts)} causal-tree leaves hold up on validation"


def validate_causal_tree(model: CausalTreeModel, validation: CohortTable, alpha: float = 0.05) -> CausalTreeValidation:
    """Gate each leaf on its estimation-half effect versus its validation effect."""
    val_effects, _ = honest_effects(model.tree, validation)
    tree, verdicts = gate_tree(model.tree, model.leaf_effects, val_effects, alpha)
    tree.metadata["method"] = "causal_tree"
    return CausalTreeValidation(tree, verdicts)
