"""Cohort tables: schema, CSV ingestion, seeded splitting and treatment bands.

A :class:`CohortTable` stores its records column-wise. Categorical covariates are
held as level indices; the :class:`CovariateSchema` owns the index/label mapping.
Study 2 panels keep one row per unit-period.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError
from .seeds import stream

RESERVED = ("unit_id", "outcome", "treatment", "period", "firm_group")
FIRM_GROUPS = ("treatment-firm", "comparison-firm", "observational")
SPLIT_LABELS = ("train", "prediction", "validation")


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str  # "numeric" | "binary" | "categorical"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name.isidentifier():
            raise DataError(f"covariate name {self.name!r} is not an identifier")
        if self.name in RESERVED:
            raise DataError(f"covariate name {self.name!r} is reserved")
        if self.kind not in ("numeric", "binary", "categorical"):
            raise DataError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise DataError(f"covariate {self.name!r}: categorical needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"covariate {self.name!r}: duplicate levels")
        elif self.levels:
            raise DataError(f"covariate {self.name!r}: only categorical covariates take levels")


@dataclass(frozen=True)
class CovariateSchema:
    entries: tuple[Covariate, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise DataError("schema needs at least one covariate")
        names = [c.name for c in self.entries]
        if len(set(names)) != len(names):
            raise DataError("schema covariate names must be unique")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> Covariate:
        for c in self.entries:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.entries)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        cols = []
        for c in self.entries:
            d = {"name": c.name, "kind": c.kind}
            if c.kind == "categorical":
                d["levels"] = list(c.levels)
            cols.append(d)
        return {"columns": cols}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CovariateSchema":
        try:
            cols = doc["columns"]
            return cls(tuple(Covariate(c["name"], c["kind"], tuple(c.get("levels", ()))) for c in cols))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed schema document: {exc}") from exc

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_schema(path: str | Path) -> CovariateSchema:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"schema file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"schema file {path} is not valid JSON: {exc}") from exc
    return CovariateSchema.from_dict(doc)


def write_schema(schema: CovariateSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    outcome: float
    treatment: float
    covariates: tuple
    period: int | None = None
    firm_group: str | None = None
    arm: int | None = None


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CohortTable:
    """Unit-level (or unit-period) records conforming to a schema.

    ``covariates`` is an ``(n, J)`` float array; categorical columns hold level
    indices. ``split_assignment`` maps unit ids to a split label.
    """

    schema: CovariateSchema
    unit_id: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    period: np.ndarray | None = None
    firm_group: np.ndarray | None = None
    arm: np.ndarray | None = None
    split_assignment: Mapping[str, str] | None = field(default=None)

    def __post_init__(self):
        n = len(self.unit_id)
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("unit_id", _frozen(np.asarray(self.unit_id, dtype=object)))
        set_("outcome", _frozen(np.asarray(self.outcome, dtype=float)))
        set_("treatment", _frozen(np.asarray(self.treatment, dtype=float)))
        cov = np.asarray(self.covariates, dtype=float).reshape(n, len(self.schema))
        set_("covariates", _frozen(cov))
        if self.period is not None:
            set_("period", _frozen(np.asarray(self.period, dtype=np.int64)))
        if self.firm_group is not None:
            set_("firm_group", _frozen(np.asarray(self.firm_group, dtype=object)))
        if self.arm is not None:
            set_("arm", _frozen(np.asarray(self.arm, dtype=np.int64)))
        for name in ("outcome", "treatment", "period", "firm_group", "arm"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise DataError(f"column {name} has length {len(col)}, expected {n}")
        if self.split_assignment is not None:
            assign = dict(self.split_assignment)
            if set(assign) != set(self.unit_id.tolist()):
                raise DataError("split assignment must cover every unit exactly once")
            set_("split_assignment", assign)

    def __len__(self) -> int:
        return len(self.unit_id)

    @property
    def n_units(self) -> int:
        return len(set(self.unit_id.tolist()))

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.schema.index(name)]

    def subset(self, rows) -> "CohortTable":
        """Rows selected by boolean mask or index array. A split map is narrowed to the kept units."""
        idx = np.arange(len(self))[rows]
        split = None
        if self.split_assignment is not None:
            kept = set(self.unit_id[idx].tolist())
            split = {u: lab for u, lab in self.split_assignment.items() if u in kept}
        opt = lambda a: None if a is None else a[idx]
        return CohortTable(
            self.schema,
            self.unit_id[idx],
            self.outcome[idx],
            self.treatment[idx],
            self.covariates[idx],
            period=opt(self.period),
            firm_group=opt(self.firm_group),
            arm=opt(self.arm),
            split_assignment=split,
        )

    def split_labels(self) -> np.ndarray:
        if self.split_assignment is None:
            raise DataError("table has no split assignment")
        return np.array([self.split_assignment[u] for u in self.unit_id], dtype=object)

    def part(self, label: str) -> "CohortTable":
        """Rows whose unit carries split ``label``; the returned table is unsplit."""
        t = self.subset(self.split_labels() == label)
        return t.replace(split_assignment=None)

    def replace(self, **changes) -> "CohortTable":
        kw = dict(
            schema=self.schema,
            unit_id=self.unit_id,
            outcome=self.outcome,
            treatment=self.treatment,
            covariates=self.covariates,
            period=self.period,
            firm_group=self.firm_group,
            arm=self.arm,
            split_assignment=self.split_assignment,
        )
        kw.update(changes)
        return CohortTable(**kw)

    def records(self) -> Iterator[UnitRecord]:
        for i in range(len(self)):
            yield UnitRecord(
                unit_id=self.unit_id[i],
                outcome=float(self.outcome[i]),
                treatment=float(self.treatment[i]),
                covariates=tuple(self.decode_row(i)),
                period=None if self.period is None else int(self.period[i]),
                firm_group=None if self.firm_group is None else self.firm_group[i],
                arm=None if self.arm is None else int(self.arm[i]),
            )

    def decode_row(self, i: int) -> list:
        out = []
        for j, c in enumerate(self.schema.entries):
            v = self.covariates[i, j]
            if c.kind == "categorical":
                out.append(c.levels[int(v)])
            elif c.kind == "binary":
                out.append(int(v))
            else:
                out.append(float(v))
        return out

    def equals(self, other: "CohortTable") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.all(a == b))

        return (
            self.schema == other.schema
            and same(self.unit_id, other.unit_id)
            and same(self.outcome, other.outcome)
            and same(self.treatment, other.treatment)
            and same(self.covariates, other.covariates)
            and same(self.period, other.period)
            and same(self.firm_group, other.firm_group)
            and same(self.arm, other.arm)
            and self.split_assignment == other.split_assignment
        )


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return v


def load_csv(path: str | Path, schema: CovariateSchema, panel_mode: bool = False) -> CohortTable:
    """Read and validate a cohort CSV.

    Row numbers in error messages count the header as row 1. Missing covariate
    cells are rejected; nothing is imputed.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"cohort file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate header names")
    required = ["unit_id", "outcome", "treatment", *schema.names]
    if panel_mode:
        required += ["period", "firm_group"]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    allowed = set(RESERVED) | set(schema.names)
    extra = [c for c in header if c not in allowed]
    if extra:
        raise DataError(f"{path}: unexpected column(s) {', '.join(extra)}")
    pos = {c: header.index(c) for c in header}
    has_period = "period" in pos
    has_firm = "firm_group" in pos

    n = len(rows)
    ids = []
    outcome = np.empty(n)
    treatment = np.empty(n)
    cov = np.empty((n, len(schema)))
    period = np.empty(n, dtype=np.int64) if has_period else None
    firm = [] if has_firm else None
    level_index = [
        {lab: k for k, lab in enumerate(c.levels)} if c.kind == "categorical" else None for c in schema.entries
    ]
    seen = set()
    for i, row in enumerate(rows):
        rno = i + 2
        if len(row) != len(header):
            raise DataError(f"row {rno}: expected {len(header)} cells, found {len(row)}")
        uid = row[pos["unit_id"]].strip()
        if not uid:
            raise DataError(f"row {rno}, column 'unit_id': empty identifier")
        ids.append(uid)
        outcome[i] = _parse_float(row[pos["outcome"]], rno, "outcome")
        treatment[i] = _parse_float(row[pos["treatment"]], rno, "treatment")
        key = uid
        if has_period:
            text = row[pos["period"]].strip()
            try:
                period[i] = int(text)
            except ValueError:
                raise DataError(f"row {rno}, column 'period': cannot parse {text!r} as an integer") from None
            key = (uid, int(period[i]))
        if key in seen:
            where = f" in period {key[1]}" if has_period else ""
            raise DataError(f"row {rno}: duplicate unit_id {uid!r}{where}")
        seen.add(key)
        if has_firm:
            fg = row[pos["firm_group"]].strip()
            if fg not in FIRM_GROUPS:
                raise DataError(f"row {rno}, column 'firm_group': {fg!r} not one of {FIRM_GROUPS}")
            firm.append(fg)
        for j, c in enumerate(schema.entries):
            text = row[pos[c.name]].strip()
            if text == "":
                raise DataError(f"row {rno}, column {c.name!r}: missing value")
            if c.kind == "categorical":
                if text not in level_index[j]:
                    raise DataError(
                        f"row {rno}, column {c.name!r}: value {text!r} not in declared levels {list(c.levels)}"
                    )
                cov[i, j] = level_index[j][text]
            else:
                v = _parse_float(text, rno, c.name)
                if c.kind == "binary" and v not in (0.0, 1.0):
                    raise DataError(f"row {rno}, column {c.name!r}: binary value must be 0 or 1, got {text!r}")
                cov[i, j] = v
    return CohortTable(schema, np.array(ids, dtype=object), outcome, treatment, cov, period=period, firm_group=firm)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(table: CohortTable, path: str | Path) -> None:
    """Emit ``table`` in the format :func:`load_csv` reads. Floats use ``repr`` so values round-trip exactly."""
    header = ["unit_id", "outcome", "treatment"]
    if table.period is not None:
        header.append("period")
    if table.firm_group is not None:
        header.append("firm_group")
    header += table.schema.names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(table)):
            row = [table.unit_id[i], _fmt(table.outcome[i]), _fmt(table.treatment[i])]
            if table.period is not None:
                row.append(str(int(table.period[i])))
            if table.firm_group is not None:
                row.append(table.firm_group[i])
            for v, c in zip(table.decode_row(i), table.schema.entries):
                row.append(_fmt(v) if c.kind == "numeric" else str(v))
            w.writerow(row)


def _allocate(n: int, weights: Sequence[float]) -> list[int]:
    # largest remainder; ties go to the earlier label
    raw = [n * w for w in weights]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(weights)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split(table: CohortTable, fractions: Sequence[tuple[str, float]], seed: int) -> CohortTable:
    """Randomly assign every unit to one split label.

    Unit ids are sorted before a seeded permutation, so row order never affects
    the result. All rows of a panel unit share one label.

    >>> # split(table, [("train", 0.5), ("validation", 0.5)], seed=42)
    """
    if table.split_assignment is not None:
        raise DataError("table is already split")
    labels = [lab for lab, _ in fractions]
    weights = [float(w) for _, w in fractions]
    if not labels or len(set(labels)) != len(labels):
        raise DataError("split labels must be non-empty and unique")
    if any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise DataError("split weights must be positive and sum to 1")
    units = sorted(set(table.unit_id.tolist()))
    order = stream(seed, "split").permutation(len(units))
    counts = _allocate(len(units), weights)
    assignment = {}
    start = 0
    for lab, c in zip(labels, counts):
        for k in order[start : start + c]:
            assignment[units[k]] = lab
        start += c
    return table.replace(split_assignment=assignment)


def filter_treatment_bands(
    table: CohortTable, control_band: tuple[float, float], treated_band: tuple[float, float]
) -> CohortTable:
    """Keep units whose continuous treatment falls in one of two closed bands.

    Units in ``control_band`` get ``arm=0``, those in ``treated_band`` get ``arm=1``;
    everyone else is dropped. The continuous treatment column is kept as is.
    """
    (c_lo, c_hi), (t_lo, t_hi) = control_band, treated_band
    if c_lo > c_hi or t_lo > t_hi:
        raise DataError("band bounds must satisfy lo <= hi")
    if not (c_hi < t_lo or t_hi < c_lo):
        raise DataError(f"treatment bands overlap: {control_band} and {treated_band}")
    a = table.treatment
    in_c = (a >= c_lo) & (a <= c_hi)
    in_t = (a >= t_lo) & (a <= t_hi)
    if not in_c.any() or not in_t.any():
        raise DataError(
            f"band filter leaves an empty arm (control={int(in_c.sum())}, treated={int(in_t.sum())})"
        )
    keep = in_c | in_t
    out = table.subset(keep)
    return out.replace(arm=in_t[keep].astype(np.int64))
