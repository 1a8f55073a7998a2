"""Partition rule trees: the artifact carried from Study 1 into Study 2.

Internal nodes route a unit left when its predicate holds. Numeric predicates
are ``var <= threshold``; categorical predicates are ``var in subset`` with the
subset stored in schema level order. Leaves are numbered 0, 1, ... from left to
right and carry free-form metadata that never affects routing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .cohort import CohortTable, CovariateSchema, UnitRecord
from .errors import DataError, RuleFormatError, SchemaMismatchError

FORMAT_TAG = "hte-rules/1"


@dataclass(frozen=True)
class Predicate:
    variable: str
    form: str  # "threshold" | "subset"
    threshold: float | None = None
    levels: tuple[str, ...] = ()

    @classmethod
    def le(cls, variable: str, threshold: float) -> "Predicate":
        return cls(variable, "threshold", threshold=float(threshold))

    @classmethod
    def isin(cls, variable: str, levels) -> "Predicate":
        return cls(variable, "subset", levels=tuple(levels))

    def describe(self) -> str:
        if self.form == "threshold":
            return f"{self.variable} <= {self.threshold:g}"
        return f"{self.variable} in {{{', '.join(self.levels)}}}"

    def negated(self) -> str:
        if self.form == "threshold":
            return f"{self.variable} > {self.threshold:g}"
        return f"{self.variable} not in {{{', '.join(self.levels)}}}"


@dataclass
class Leaf:
    leaf_id: int = -1
    metadata: dict = field(default_factory=dict)


@dataclass
class Split:
    predicate: Predicate
    left: "Node"
    right: "Node"


Node = Union[Leaf, Split]


class PartitionRuleTree:
    """Binary predicate tree over a covariate schema."""

    def __init__(self, root: Node, schema: CovariateSchema, metadata: dict | None = None):
        self.root = root
        self.schema = schema
        self.metadata = dict(metadata or {})
        self._number_leaves()
        self._validate()

    # structure ----------------------------------------------------------------

    def _number_leaves(self) -> None:
        for k, leaf in enumerate(self.leaves):
            leaf.leaf_id = k

    @property
    def leaves(self) -> list[Leaf]:
        out = []

        def walk(node):
            if isinstance(node, Leaf):
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def depth(self) -> int:
        def d(node):
            return 0 if isinstance(node, Leaf) else 1 + max(d(node.left), d(node.right))

        return d(self.root)

    def leaf(self, leaf_id: int) -> Leaf:
        return self.leaves[leaf_id]

    def variables(self) -> set[str]:
        out = set()
        for node in self._splits():
            out.add(node.predicate.variable)
        return out

    def _splits(self) -> Iterator[Split]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Split):
                yield node
                stack += [node.left, node.right]

    def paths(self) -> dict[int, list[str]]:
        """Human-readable conjunction of conditions for every leaf."""
        out: dict[int, list[str]] = {}

        def walk(node, conds):
            if isinstance(node, Leaf):
                out[node.leaf_id] = conds
            else:
                walk(node.left, conds + [node.predicate.describe()])
                walk(node.right, conds + [node.predicate.negated()])

        walk(self.root, [])
        return out

    def _validate(self) -> None:
        def check_pred(p: Predicate):
            if p.variable not in self.schema:
                raise SchemaMismatchError(f"predicate variable {p.variable!r} not in schema")
            cov = self.schema[p.variable]
            if p.form == "threshold":
                if cov.kind == "categorical":
                    raise RuleFormatError(f"threshold predicate on categorical {p.variable!r}")
                if p.threshold is None or not math.isfinite(p.threshold):
                    raise RuleFormatError(f"predicate on {p.variable!r} needs a finite threshold")
            elif p.form == "subset":
                if cov.kind != "categorical":
                    raise RuleFormatError(f"subset predicate on non-categorical {p.variable!r}")
                lv = list(p.levels)
                if not lv or len(lv) >= len(cov.levels) or len(set(lv)) != len(lv):
                    raise RuleFormatError(f"subset on {p.variable!r} must be a non-empty proper subset")
                if any(v not in cov.levels for v in lv):
                    raise RuleFormatError(f"subset on {p.variable!r} has undeclared levels")
                order = [cov.levels.index(v) for v in lv]
                if order != sorted(order):
                    raise RuleFormatError(f"subset on {p.variable!r} is not in schema level order")
            else:
                raise RuleFormatError(f"unknown predicate form {p.form!r}")

        def walk(node, bounds):
            if isinstance(node, Leaf):
                return
            p = node.predicate
            check_pred(p)
            lo, hi, allowed = bounds.get(p.variable, (-math.inf, math.inf, None))
            if p.form == "threshold":
                # the path so far admits lo < x <= hi
                if not lo < p.threshold < hi:
                    raise RuleFormatError(f"unsatisfiable path at {p.describe()}")
                left = (lo, p.threshold, None)
                right = (p.threshold, hi, None)
            else:
                levels = set(self.schema[p.variable].levels) if allowed is None else allowed
                lset = levels & set(p.levels)
                rset = levels - set(p.levels)
                if not lset or not rset:
                    raise RuleFormatError(f"unsatisfiable path at {p.describe()}")
                left, right = (lo, hi, lset), (lo, hi, rset)
            walk(node.left, {**bounds, p.variable: left})
            walk(node.right, {**bounds, p.variable: right})

        walk(self.root, {})

    # routing -------------------------------------------------------------------

    def check_schema(self, schema: CovariateSchema) -> None:
        """Raise if a variable used by the tree is absent or declared differently in ``schema``."""
        for v in self.variables():
            if v not in schema:
                raise SchemaMismatchError(f"rule variable {v!r} missing from data schema")
            if schema[v] != self.schema[v]:
                raise SchemaMismatchError(f"rule variable {v!r} declared differently in data schema")

    def assign(self, table: CohortTable) -> np.ndarray:
        """Leaf id for every row of ``table`` (vectorized :func:`classify`)."""
        self.check_schema(table.schema)
        out = np.full(len(table), -1, dtype=np.int64)
        cols = {v: table.column(v) for v in self.variables()}

        def walk(node, idx):
            if len(idx) == 0:
                return
            if isinstance(node, Leaf):
                out[idx] = node.leaf_id
                return
            mask = self._holds(node.predicate, cols[node.predicate.variable][idx], table.schema)
            walk(node.left, idx[mask])
            walk(node.right, idx[~mask])

        walk(self.root, np.arange(len(table)))
        return out

    def _holds(self, p: Predicate, x: np.ndarray, schema: CovariateSchema) -> np.ndarray:
        if p.form == "threshold":
            return x <= p.threshold
        cov = schema[p.variable]
        if np.any((x < 0) | (x >= len(cov.levels)) | (x != np.round(x))):
            raise DataError(f"covariate {p.variable!r} has a value outside its declared levels")
        codes = np.array([cov.levels.index(v) for v in p.levels])
        return np.isin(x.astype(np.int64), codes)

    # serialization ---------------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []

        def walk(node) -> int:
            nid = len(nodes)
            if isinstance(node, Leaf):
                nodes.append({"id": nid, "kind": "leaf", "leaf_id": node.leaf_id})
                return nid
            p = node.predicate
            entry = {"id": nid, "kind": "split", "variable": p.variable, "form": p.form}
            if p.form == "threshold":
                entry["threshold"] = p.threshold
            else:
                entry["levels"] = list(p.levels)
            nodes.append(entry)
            entry["left"] = walk(node.left)
            entry["right"] = walk(node.right)
            return nid

        walk(self.root)
        return {
            "format": FORMAT_TAG,
            "schema_hash": self.schema.hash(),
            "schema": self.schema.to_dict(),
            "metadata": _jsonable(self.metadata),
            "nodes": nodes,
            "leaves": [{"id": lf.leaf_id, "metadata": _jsonable(lf.metadata)} for lf in self.leaves],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PartitionRuleTree":
        try:
            if doc.get("format") != FORMAT_TAG:
                raise RuleFormatError(f"unsupported rule format {doc.get('format')!r}")
            schema = CovariateSchema.from_dict(doc["schema"])
            if doc.get("schema_hash") != schema.hash():
                raise RuleFormatError("schema_hash does not match embedded schema")
            nodes = {n["id"]: n for n in doc["nodes"]}
            if len(nodes) != len(doc["nodes"]):
                raise RuleFormatError("duplicate node ids")
            meta = {lf["id"]: dict(lf.get("metadata", {})) for lf in doc["leaves"]}
            seen = set()
            counter = [0]

            def build(nid):
                if nid in seen:
                    raise RuleFormatError("node graph is not a tree")
                seen.add(nid)
                n = nodes[nid]
                if n["kind"] == "leaf":
                    if n["leaf_id"] != counter[0]:
                        raise RuleFormatError("leaf ids not consecutive in left-to-right order")
                    counter[0] += 1
                    return Leaf(n["leaf_id"], meta.get(n["leaf_id"], {}))
                if n["kind"] != "split":
                    raise RuleFormatError(f"unknown node kind {n['kind']!r}")
                if n["form"] == "threshold":
                    p = Predicate.le(n["variable"], n["threshold"])
                elif n["form"] == "subset":
                    p = Predicate.isin(n["variable"], n["levels"])
                else:
                    raise RuleFormatError(f"unknown predicate form {n['form']!r}")
                return Split(p, build(n["left"]), build(n["right"]))

            root = build(0)
            tree = cls(root, schema, doc.get("metadata", {}))
        except RuleFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise RuleFormatError(f"malformed rule document: {exc}") from exc
        if len(seen) != len(nodes):
            raise RuleFormatError("rule document has unreachable nodes")
        if sorted(meta) != list(range(tree.n_leaves)):
            raise RuleFormatError("leaves[] does not list every leaf id exactly once")
        return tree

    def copy(self) -> "PartitionRuleTree":
        return PartitionRuleTree.from_dict(self.to_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def single_leaf(schema: CovariateSchema, metadata: dict | None = None) -> PartitionRuleTree:
    return PartitionRuleTree(Leaf(0, dict(metadata or {})), schema)


def classify(tree: PartitionRuleTree, unit: UnitRecord) -> int:
    """Leaf id of one unit whose covariates are given as decoded values in schema order."""
    schema = tree.schema
    if len(unit.covariates) != len(schema):
        raise DataError("unit covariate vector does not match schema length")
    values = dict(zip(schema.names, unit.covariates))
    node = tree.root
    while isinstance(node, Split):
        p = node.predicate
        v = values[p.variable]
        if p.form == "threshold":
            go_left = float(v) <= p.threshold
        else:
            if v not in schema[p.variable].levels:
                raise DataError(f"value {v!r} of {p.variable!r} outside declared levels")
            go_left = v in p.levels
        node = node.left if go_left else node.right
    return node.leaf_id


def serialize(tree: PartitionRuleTree) -> str:
    return json.dumps(tree.to_dict(), indent=2, sort_keys=True) + "\n"


def deserialize(doc: str) -> PartitionRuleTree:
    try:
        data = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise RuleFormatError(f"rule document is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise RuleFormatError("rule document must be a JSON object")
    return PartitionRuleTree.from_dict(data)


def save(tree: PartitionRuleTree, path) -> None:
    Path(path).write_text(serialize(tree), encoding="utf-8")


def load(path) -> PartitionRuleTree:
    return deserialize(Path(path).read_text(encoding="utf-8"))
