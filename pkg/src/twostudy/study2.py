"""Testing transported subgroups on the experimental panel.

Units are classified by their first-period covariates, then a negative-binomial
difference-in-differences model

    log E[y_it] = b0 + b1 post_t * treated_i + b2 post_t + b3 treated_i

is fit within each transported subgroup with standard errors clustered on
unit. ``b1`` is the subgroup's causal estimate on the log scale.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cohort import CohortTable
from .errors import DataError, TwoStudyError
from .glm import fit_negbin, wald_test
from .rules import PartitionRuleTree

CONFIRMATION_RULE = (
    "confirmed iff the DiD interaction rejects zero at the stated level and its sign "
    "matches the Study 1 hypothesis direction"
)


def indicator_cases(a1, a2, t: float) -> np.ndarray:
    """B = 1 if a2 >= t >= a1; B = 0 if both a1 and a2 are below t; B = -1 otherwise."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    b = np.full(np.broadcast(a1, a2).shape, -1, dtype=np.int8)
    b[(a2 >= t) & (t >= a1)] = 1
    b[(a1 < t) & (a2 < t)] = 0
    return b


@dataclass(frozen=True)
class TreatmentIndicator:
    unit_id: np.ndarray
    b: np.ndarray
    threshold: float | None

    def as_dict(self) -> dict:
        return dict(zip(self.unit_id.tolist(), self.b.tolist()))


def _periods(panel: CohortTable) -> tuple[int, int]:
    if panel.period is None:
        raise DataError("panel has no period column")
    ps = np.unique(panel.period)
    if len(ps) < 2:
        raise DataError("panel needs at least two periods")
    return int(ps[0]), int(ps[-1])


def build_indicator(panel: CohortTable, t: float) -> TreatmentIndicator:
    """Per-unit B from the first-period (A1) and last-period (A2) exposures."""
    pre, post = _periods(panel)
    a1 = {u: a for u, a, p in zip(panel.unit_id, panel.treatment, panel.period) if p == pre}
    a2 = {u: a for u, a, p in zip(panel.unit_id, panel.treatment, panel.period) if p == post}
    units = sorted(set(panel.unit_id.tolist()))
    missing = [u for u in units if u not in a1 or u not in a2]
    if missing:
        raise DataError(f"unit {missing[0]!r} is missing the first or last period")
    b = indicator_cases([a1[u] for u in units], [a2[u] for u in units], t)
    return TreatmentIndicator(np.array(units, dtype=object), b, t)


def indicator_from_firms(panel: CohortTable) -> TreatmentIndicator:
    """B from firm tags: treatment firm 1, comparison firm 0, anything else -1."""
    if panel.firm_group is None:
        raise DataError("panel has no firm_group column")
    tag = {}
    for u, g in zip(panel.unit_id, panel.firm_group):
        v = 1 if g == "treatment-firm" else 0 if g == "comparison-firm" else -1
        if tag.setdefault(u, v) != v:
            raise DataError(f"unit {u!r} changes firm group across periods")
    units = sorted(tag)
    return TreatmentIndicator(np.array(units, dtype=object), np.array([tag[u] for u in units], dtype=np.int8), None)


def baseline_rows(panel: CohortTable) -> CohortTable:
    """The first-period row of every unit."""
    pre, _ = _periods(panel)
    return panel.subset(panel.period == pre)


@dataclass
class CausalEstimate:
    leaf_id: int | None  # None for the pooled estimate
    beta1: float
    se_cluster: float
    n_treated: int
    n_control: int
    p_value: float = float("nan")
    hypothesis_direction: str = "null"
    verdict: str | None = None
    note: str = ""
    dispersion: float = float("nan")

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.beta1 - 1.96 * self.se_cluster, self.beta1 + 1.96 * self.se_cluster)

    @property
    def cluster(self) -> int:
        # pooled is cluster 0, tree leaves are numbered from 1
        return 0 if self.leaf_id is None else self.leaf_id + 1

    @property
    def estimable(self) -> bool:
        return np.isfinite(self.beta1)

    def row(self) -> dict:
        lo, hi = self.ci95
        return {
            "cluster": self.cluster,
            "leaf_id": "pooled" if self.leaf_id is None else self.leaf_id,
            "hypothesis_direction": self.hypothesis_direction,
            "beta1": self.beta1,
            "se_cluster": self.se_cluster,
            "ci_lo": lo,
            "ci_hi": hi,
            "p_value": self.p_value,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "verdict": self.verdict or "",
            "note": self.note,
        }


def fit_did(rows: CohortTable, treated_units: set, post_period: int):
    """NB2 DiD on the given unit-period rows, clustered by unit."""
    treat = np.array([u in treated_units for u in rows.unit_id], dtype=float)
    post = (rows.period == post_period).astype(float)
    y = rows.outcome
    for tv in (0.0, 1.0):
        for pv in (0.0, 1.0):
            cell = (treat == tv) & (post == pv)
            if not cell.any():
                raise DataError("a (group, period) cell of the DiD design is empty")
            if not np.any(y[cell] > 0):
                raise DataError("a (group, period) cell of the DiD design has only zero outcomes")
    X = np.column_stack([np.ones(len(y)), post * treat, post, treat])
    return fit_negbin(X, y, names=("b0", "post_x_treated", "post", "treated"), clusters=rows.unit_id)


def estimate_subgroups(
    panel: CohortTable,
    tree: PartitionRuleTree,
    threshold: float | None = None,
    min_fit_size: int = 50,
    workers: int = 1,
) -> list[CausalEstimate]:
    """Pooled estimate followed by one estimate per non-noisy leaf of ``tree``, in leaf order."""
    _, post = _periods(panel)
    ind = build_indicator(panel, threshold) if threshold is not None else indicator_from_firms(panel)
    b = ind.as_dict()
    keep_units = {u for u, v in b.items() if v in (0, 1)}
    treated_units = {u for u, v in b.items() if v == 1}
    rows = panel.subset(np.array([u in keep_units for u in panel.unit_id]))
    base = baseline_rows(rows)
    leaf_of_unit = dict(zip(base.unit_id.tolist(), tree.assign(base).tolist()))
    row_leaf = np.array([leaf_of_unit[u] for u in rows.unit_id])

    jobs: list[tuple[int | None, np.ndarray, str]] = [(None, np.ones(len(rows), dtype=bool), "null")]
    for leaf in tree.leaves:
        if leaf.metadata.get("excluded_from_study2") or leaf.metadata.get("stability_label") == "noisy":
            continue
        jobs.append((leaf.leaf_id, row_leaf == leaf.leaf_id, leaf.metadata.get("hypothesis_direction", "null")))

    def run(job):
        lid, mask, direction = job
        sub = rows.subset(mask)
        units = set(sub.unit_id.tolist())
        n_t = len(units & treated_units)
        n_c = len(units) - n_t
        est = CausalEstimate(lid, float("nan"), float("nan"), n_t, n_c, hypothesis_direction=direction)
        if len(units) < min_fit_size:
            est.note = f"unestimable: {len(units)} units < minimum {min_fit_size}"
            return est
        try:
            fit = fit_did(sub, treated_units, post)
        except TwoStudyError as exc:
            est.note = f"unestimable: {exc}"
            return est
        est.beta1 = fit.coef("post_x_treated")
        est.se_cluster = fit.se("post_x_treated")
        est.dispersion = fit.dispersion
        est.p_value = wald_test(est.beta1, est.se_cluster).p_value if est.se_cluster > 0 else float("nan")
        return est

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


@dataclass
class ConfirmationTable:
    rows: list[CausalEstimate]
    alpha: float
    bonferroni: bool
    rule: str = CONFIRMATION_RULE

    @property
    def n_hypotheses(self) -> int:
        return len(self.rows)

    @property
    def n_confirmed(self) -> int:
        return sum(r.verdict == "confirmed" for r in self.rows)

    def summary(self) -> str:
        return f"{self.n_confirmed}/{self.n_hypotheses} confirmed"

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "bonferroni": self.bonferroni,
            "rule": self.rule,
            "confirmed": self.n_confirmed,
            "fail_to_reject": self.n_hypotheses - self.n_confirmed,
            "hypotheses": self.n_hypotheses,
            "summary": self.summary(),
            "rows": [r.row() for r in self.rows],
        }


def confirm_hypotheses(
    estimates: list[CausalEstimate], tree: PartitionRuleTree, alpha: float = 0.05, bonferroni: bool = False
) -> ConfirmationTable:
    """Judge every directional (stable-high) hypothesis of ``tree`` against its Study 2 estimate."""
    by_leaf = {e.leaf_id: e for e in estimates if e.leaf_id is not None}
    hyps = [lf for lf in tree.leaves if lf.metadata.get("hypothesis_direction") in ("negative", "positive")]
    level = alpha / len(hyps) if bonferroni and hyps else alpha
    rows = []
    for lf in hyps:
        direction = lf.metadata["hypothesis_direction"]
        est = by_leaf.get(lf.leaf_id)
        if est is None:
            est = CausalEstimate(lf.leaf_id, float("nan"), float("nan"), 0, 0, note="no estimate")
        est.hypothesis_direction = direction
        sign_ok = (est.beta1 < 0) if direction == "negative" else (est.beta1 > 0)
        confirmed = est.estimable and est.p_value < level and sign_ok
        est.verdict = "confirmed" if confirmed else "fail-to-reject"
        rows.append(est)
    return ConfirmationTable(rows, alpha, bonferroni)
