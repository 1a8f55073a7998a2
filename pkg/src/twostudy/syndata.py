"""Synthetic cohorts with planted subgroups and known effects.

Every leaf of the planted rule tree carries a true effect ``tau`` on the log
mean (or on the mean for Gaussian outcomes). ``tau`` is the effect of the cost
shock ``delta``: with continuous exposure the per-unit slope is ``tau / delta``,
with binary exposure ``tau`` is the full arm contrast. Leaf metadata may also
set ``base`` to override the scenario's baseline intercept.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import CohortTable, Covariate, CovariateSchema
from .errors import ConfigError
from .rules import Leaf, PartitionRuleTree, Predicate, Split
from .seeds import stream


@dataclass(frozen=True)
class CovariateSpec:
    """Generator for one covariate: numeric ~ U(low, high), binary ~ Bernoulli(p), categorical ~ probs."""

    name: str
    kind: str
    low: float = 0.0
    high: float = 1.0
    p: float = 0.5
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] | None = None

    def covariate(self) -> Covariate:
        return Covariate(self.name, self.kind, tuple(self.levels))

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "numeric":
            return rng.uniform(self.low, self.high, n)
        if self.kind == "binary":
            return (rng.random(n) < self.p).astype(float)
        probs = self.probs or tuple([1.0 / len(self.levels)] * len(self.levels))
        return rng.choice(len(self.levels), size=n, p=np.asarray(probs) / np.sum(probs)).astype(float)


@dataclass(frozen=True)
class Scenario:
    n_units: int
    covariates: tuple[CovariateSpec, ...]
    planted: PartitionRuleTree
    design: str = "observational"  # or "experimental"
    exposure: str = "continuous"  # observational only: "continuous" | "binary"
    exposure_range: tuple[float, float] = (0.0, 70.0)
    delta: float = 45.0
    confounding: float = 0.0
    confounder: str | None = None
    prognostic: dict = field(default_factory=dict)  # covariate -> coefficient on the standardized value
    family: str = "negbin"  # or "gaussian"
    dispersion: float = 0.5  # NB2 alpha, or Gaussian noise sd
    base: float = 1.0
    # experimental panel
    periods: tuple[int, int] = (2011, 2012)
    treated_share: float = 0.5
    a1_range: tuple[float, float] = (5.0, 25.0)
    threshold: float = 30.0
    frailty: float = 0.0  # variance of a mean-one gamma unit effect
    trend: float = 0.0
    firm_offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.n_units < 1:
            raise ConfigError("n_units must be positive")
        schema = self.schema
        if self.planted.schema != schema:
            raise ConfigError("planted partition schema does not match the covariate specs")
        for lf in self.planted.leaves:
            if "tau" not in lf.metadata:
                raise ConfigError(f"planted leaf {lf.leaf_id} has no tau")
        if self.design not in ("observational", "experimental"):
            raise ConfigError(f"unknown design {self.design!r}")
        if self.exposure not in ("continuous", "binary"):
            raise ConfigError(f"unknown exposure {self.exposure!r}")
        if self.family not in ("negbin", "gaussian"):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.dispersion < 0 or self.frailty < 0:
            raise ConfigError("dispersion and frailty must be non-negative")
        if self.delta <= 0 and (self.design == "experimental" or self.exposure == "continuous"):
            raise ConfigError("delta must be positive")
        if self.confounding and self.confounder not in schema:
            raise ConfigError("confounding needs a confounder covariate from the schema")
        for name in self.prognostic:
            if name not in schema:
                raise ConfigError(f"prognostic covariate {name!r} not in schema")
        if not 0 < self.treated_share < 1:
            raise ConfigError("treated_share must lie in (0, 1)")
        lo, hi = self.a1_range
        if self.design == "experimental" and not (lo <= hi < self.threshold <= hi + self.delta):
            raise ConfigError("a1_range, threshold and delta must give B=1 for shocked and B=0 for unshocked units")

    @property
    def schema(self) -> CovariateSchema:
        return CovariateSchema(tuple(c.covariate() for c in self.covariates))


@dataclass(frozen=True)
class TruthRecord:
    unit_id: np.ndarray
    true_leaf: np.ndarray
    true_tau: np.ndarray
    mu0: np.ndarray  # expected outcome without the shock (first period for panels)
    mu1: np.ndarray  # expected outcome with the shock

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "true_leaf", "true_tau"])
            for u, lf, t in zip(self.unit_id, self.true_leaf, self.true_tau):
                w.writerow([u, int(lf), repr(float(t))])


def read_truth_csv(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {r["unit_id"]: (int(r["true_leaf"]), float(r["true_tau"])) for r in csv.DictReader(fh)}


def _unit_ids(n: int) -> np.ndarray:
    width = max(6, len(str(n)))
    return np.array([f"u{i:0{width}d}" for i in range(1, n + 1)], dtype=object)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _covariates(sc: Scenario, rng) -> np.ndarray:
    return np.column_stack([spec.draw(rng, sc.n_units) for spec in sc.covariates])


def _leaf_terms(sc: Scenario, table: CohortTable):
    leaf = sc.planted.assign(table)
    tau = np.array([sc.planted.leaf(k).metadata["tau"] for k in leaf], dtype=float)
    base = np.array([sc.planted.leaf(k).metadata.get("base", sc.base) for k in leaf], dtype=float)
    for name, coef in sorted(sc.prognostic.items()):
        base = base + coef * _standardize(table.column(name))
    return leaf, tau, base


def _draw(sc: Scenario, eta: np.ndarray, rng) -> np.ndarray:
    if sc.family == "gaussian":
        return eta + sc.dispersion * rng.standard_normal(len(eta))
    mu = np.exp(eta)
    if sc.dispersion > 0:
        mu = mu * rng.gamma(1.0 / sc.dispersion, sc.dispersion, len(mu))
    return rng.poisson(mu).astype(float)


def _mean(sc: Scenario, eta: np.ndarray) -> np.ndarray:
    return eta if sc.family == "gaussian" else np.exp(eta)


def generate_observational(sc: Scenario) -> tuple[CohortTable, TruthRecord]:
    """One row per unit with its exposure and outcome."""
    if sc.design != "observational":
        raise ConfigError("scenario design is not observational")
    rng_x, rng_a, rng_y = (stream(sc.seed, "syndata", k) for k in ("covariates", "exposure", "outcome"))
    ids = _unit_ids(sc.n_units)
    X = _covariates(sc, rng_x)
    n = sc.n_units
    stub = CohortTable(sc.schema, ids, np.zeros(n), np.zeros(n), X)
    leaf, tau, base = _leaf_terms(sc, stub)
    if sc.confounding:
        pi = 1.0 / (1.0 + np.exp(-sc.confounding * _standardize(stub.column(sc.confounder))))
    else:
        pi = np.full(n, 0.5)
    lo, hi = sc.exposure_range
    if sc.exposure == "binary":
        A = (rng_a.random(n) < pi).astype(float)
        eta0, eta1 = base, base + tau
        eta = base + tau * A
    else:
        # upper half of the range with probability pi, so strength 0 gives U(lo, hi)
        mid = (lo + hi) / 2
        upper = rng_a.random(n) < pi
        A = np.where(upper, rng_a.uniform(mid, hi, n), rng_a.uniform(lo, mid, n))
        slope = tau / sc.delta
        eta = base + slope * A
        eta0, eta1 = eta, eta + tau
    y = _draw(sc, eta, rng_y)
    table = CohortTable(sc.schema, ids, y, A, X, firm_group=np.full(n, "observational", dtype=object))
    return table, TruthRecord(ids, leaf, tau, _mean(sc, eta0), _mean(sc, eta1))


def generate_experimental(sc: Scenario) -> tuple[CohortTable, TruthRecord]:
    """Two-period panel; treatment-firm units get exposure ``A1 + delta`` in the second period."""
    if sc.design != "experimental":
        raise ConfigError("scenario design is not experimental")
    rng_x, rng_a, rng_y = (stream(sc.seed, "syndata", k) for k in ("covariates", "exposure", "outcome"))
    n = sc.n_units
    ids = _unit_ids(n)
    X = _covariates(sc, rng_x)
    stub = CohortTable(sc.schema, ids, np.zeros(n), np.zeros(n), X)
    leaf, tau, base = _leaf_terms(sc, stub)
    treated = rng_a.random(n) < sc.treated_share
    a1 = rng_a.uniform(*sc.a1_range, n)
    a2 = np.where(treated, a1 + sc.delta, a1)
    u = rng_y.gamma(1.0 / sc.frailty, sc.frailty, n) if sc.frailty > 0 else np.ones(n)
    log_u = np.log(u) if sc.family == "negbin" else u - 1.0
    ys = []
    for post in (0.0, 1.0):
        eta = base + log_u + sc.trend * post + sc.firm_offset * treated + tau * post * treated
        ys.append(_draw(sc, eta, rng_y))
    p0, p1 = sc.periods
    table = CohortTable(
        sc.schema,
        np.concatenate([ids, ids]),
        np.concatenate(ys),
        np.concatenate([a1, a2]),
        np.vstack([X, X]),
        period=np.concatenate([np.full(n, p0), np.full(n, p1)]),
        firm_group=np.array(["treatment-firm" if t else "comparison-firm" for t in treated] * 2, dtype=object),
    )
    eta0 = base + sc.firm_offset * treated
    truth = TruthRecord(ids, leaf, tau, _mean(sc, eta0), _mean(sc, eta0 + tau))
    return table, truth


# ready-made scenarios -------------------------------------------------------------


def enrollee_covariates(n_noise: int = 0) -> tuple[CovariateSpec, ...]:
    """Enrollee-like covariates: demographics, region, comorbidity and prior use, plus noise columns."""
    specs = [
        CovariateSpec("age", "numeric", 18.0, 64.0),
        CovariateSpec("female", "binary", p=0.5),
        CovariateSpec("region", "categorical", levels=("northeast", "north_central", "south", "west")),
        CovariateSpec("chronic", "binary", p=0.3),
        CovariateSpec("prior_visits", "numeric", 0.0, 12.0),
    ]
    specs += [CovariateSpec(f"noise{k}", "numeric") for k in range(1, n_noise + 1)]
    return tuple(specs)


def default_partition(schema: CovariateSchema, taus=(-0.3, 0.0, 0.25)) -> PartitionRuleTree:
    """Leaf 0: age <= 40. Leaf 1: over 40 without a chronic condition. Leaf 2: over 40 and chronic."""
    t0, t1, t2 = taus
    root = Split(
        Predicate.le("age", 40.0),
        Leaf(metadata={"tau": t0}),
        Split(Predicate.le("chronic", 0.5), Leaf(metadata={"tau": t1}), Leaf(metadata={"tau": t2})),
    )
    return PartitionRuleTree(root, schema, {"method": "planted"})


def default_scenario(design: str = "observational", n_units: int = 20000, seed: int = 0, **overrides) -> Scenario:
    specs = enrollee_covariates()
    schema = CovariateSchema(tuple(c.covariate() for c in specs))
    kw = dict(
        n_units=n_units,
        covariates=specs,
        planted=default_partition(schema),
        design=design,
        seed=seed,
        dispersion=0.5,
        base=1.0,
    )
    if design == "experimental":
        kw.update(frailty=0.3, trend=0.05)
    kw.update(overrides)
    return Scenario(**kw)
