"""Sample-splitting stability gate for learned subgroups.

A subgroup is *stable-high* when its training and validation estimates both
reject zero, point the same way, and do not differ significantly; *stable-low*
when neither rejects zero; *noisy* otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .glm import TestResult, difference_test, wald_test
from .rules import PartitionRuleTree

STABLE_HIGH = "stable-high"
STABLE_LOW = "stable-low"
NOISY = "noisy"


@dataclass(frozen=True)
class StabilityVerdict:
    leaf_id: int
    label: str
    train: tuple[float, float] | None
    val: tuple[float, float] | None
    train_vs_zero: TestResult | None
    val_vs_zero: TestResult | None
    difference: TestResult | None
    alpha: float
    note: str = ""

    @property
    def direction(self) -> str:
        if self.label == STABLE_HIGH:
            return "negative" if self.train[0] < 0 else "positive"
        return "null"

    @staticmethod
    def row_fields() -> tuple[str, ...]:
        return ("leaf_id", "label", "train_est", "train_se", "val_est", "val_se", "p_train", "p_val", "p_diff")

    def row(self) -> dict:
        nan = float("nan")
        t = self.train or (nan, nan)
        v = self.val or (nan, nan)
        p = lambda r: nan if r is None else r.p_value
        return {
            "leaf_id": self.leaf_id,
            "label": self.label,
            "train_est": t[0],
            "train_se": t[1],
            "val_est": v[0],
            "val_se": v[1],
            "p_train": p(self.train_vs_zero),
            "p_val": p(self.val_vs_zero),
            "p_diff": p(self.difference),
        }


def classify_subgroup(train: tuple[float, float], val: tuple[float, float], alpha: float = 0.05, leaf_id: int = 0):
    if not 0 < alpha < 1:
        raise DataError("alpha must lie in (0, 1)")
    t0 = wald_test(train[0], train[1])
    v0 = wald_test(val[0], val[1])
    d = difference_test(train, val)
    same_sign = np.sign(train[0]) == np.sign(val[0]) and train[0] != 0
    if t0.p_value < alpha and v0.p_value < alpha and same_sign and d.p_value >= alpha:
        label = STABLE_HIGH
    elif t0.p_value >= alpha and v0.p_value >= alpha:
        label = STABLE_LOW
    else:
        label = NOISY
    return StabilityVerdict(leaf_id, label, tuple(train), tuple(val), t0, v0, d, alpha)


def gate_tree(
    tree: PartitionRuleTree,
    train_stats: dict[int, tuple[float, float]],
    val_stats: dict[int, tuple[float, float]],
    alpha: float = 0.05,
) -> tuple[PartitionRuleTree, list[StabilityVerdict]]:
    """Label every leaf and write the verdict into a copy of ``tree``.

    A leaf missing from either stats map, or with a non-positive standard
    error, is labeled noisy with a note. Noisy leaves stay in the tree but are
    flagged ``excluded_from_study2``.
    """
    out = tree.copy()
    verdicts = []
    for leaf in out.leaves:
        lid = leaf.leaf_id
        tr, va = train_stats.get(lid), val_stats.get(lid)
        if tr is None or va is None:
            which = "training" if tr is None else "validation"
            v = StabilityVerdict(lid, NOISY, tr, va, None, None, None, alpha, note=f"empty {which} leaf")
        elif not (tr[1] > 0 and va[1] > 0):
            v = StabilityVerdict(lid, NOISY, tr, va, None, None, None, alpha, note="non-positive standard error")
        else:
            v = classify_subgroup(tr, va, alpha, leaf_id=lid)
        verdicts.append(v)
        leaf.metadata.update(
            {
                "train_estimate": None if tr is None else float(tr[0]),
                "train_se": None if tr is None else float(tr[1]),
                "val_estimate": None if va is None else float(va[0]),
                "val_se": None if va is None else float(va[1]),
                "stability_label": v.label,
                "hypothesis_direction": v.direction,
                "excluded_from_study2": v.label == NOISY,
            }
        )
    out.metadata["gate_alpha"] = alpha
    return out, verdicts
