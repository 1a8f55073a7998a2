"""Run configuration and the end-to-end stages behind the command line.

Each stage reads its inputs, writes its artifacts into the output directory and
returns the in-memory results so callers (and tests) can chain stages without
re-reading files.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from . import rules as rules_io
from .causal_tree import CausalTreeConfig, first_differences, fit_causal_tree, validate_causal_tree
from .cohort import CohortTable, filter_treatment_bands, load_csv, load_schema, split, write_csv, write_schema
from .errors import ConfigError, DataError
from .glm import design_matrix, fit_ols, transform_outcome
from .mob import MobConfig, grow
from .rules import PartitionRuleTree
from .seeds import derive_seed
from .stability import StabilityVerdict, gate_tree
from .study2 import CausalEstimate, ConfirmationTable, confirm_hypotheses, estimate_subgroups
from .syndata import default_partition, default_scenario, generate_experimental, generate_observational
from .tcdforest import CartConfig, ForestParams, compute_tcd, default_grid, encode, fit_forest, grow_tcd_tree, node_stats, tune_forest

MODES = ("simulate", "study1-param", "study1-nonparam", "study2", "causal-tree", "pipeline", "report")
METHOD_TAGS = {"mob": "param", "tcd_cart": "nonparam", "causal_tree": "causal_tree"}


@dataclass
class RunConfig:
    mode: str = "pipeline"
    out: str = "out"
    data: str | None = None  # observational cohort CSV
    panel: str | None = None  # experimental panel CSV
    schema: str | None = None
    rules: str | None = None  # rule file for the study2 mode
    alpha: float = 0.05
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    outcome_transform: str = "log1p"
    # study 1, parametric
    param_train_fraction: float = 0.5
    min_cluster_size: int = 1000
    max_depth: int = 6
    n_permutations: int = 999
    candidate_variables: list | None = None
    adjust: list = field(default_factory=list)
    # study 1, non-parametric
    control_band: list = field(default_factory=lambda: [0.0, 15.0])
    treated_band: list = field(default_factory=lambda: [40.0, 70.0])
    forest_trees: int = 200
    forest_min_node_size: int = 5
    forest_max_depth: int | None = None
    forest_m_try: int | None = None
    forest_tune: bool = False
    forest_folds: int = 5
    tcd_formula: str = "observed"
    cart_min_leaf: int = 100
    cart_folds: int = 5
    n_bootstrap: int = 200
    # study 2
    threshold: float | None = 30.0  # None: arms from firm tags
    delta: float = 45.0
    min_fit_size: int = 50
    bonferroni: bool = False
    # causal tree
    ct_min_leaf: int = 25
    ct_validation_fraction: float = 0.5
    ct_folds: int = 5
    # simulate
    sim_n_observational: int = 40000
    sim_n_experimental: int = 8500
    sim_taus: list = field(default_factory=lambda: [-0.3, 0.0, 0.25])
    sim_dispersion: float = 0.5
    sim_frailty: float = 0.3
    sim_confounding: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.outcome_transform not in ("log1p", "identity"):
            raise ConfigError(f"unknown outcome_transform {self.outcome_transform!r}")
        if len(self.sim_taus) != 3:
            raise ConfigError("sim_taus needs one effect per planted leaf (3)")

    @classmethod
    def from_sources(cls, file_values: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then the flat JSON config, then command-line values (which win)."""
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for src in (file_values or {}, overrides or {}):
            unknown = sorted(set(src) - names)
            if unknown:
                raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
            kw.update({k: v for k, v in src.items() if v is not None})
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def echo(self) -> dict:
        # worker count and output location do not affect results, so they are left out
        d = dataclasses.asdict(self)
        d.pop("workers")
        d.pop("out")
        for k in ("data", "panel", "schema", "rules"):
            if d[k] is not None:
                d[k] = Path(d[k]).name
        return d


# file helpers ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_rows(path: Path, rows: list[dict], header: list[str] | None = None) -> None:
    header = header or (list(rows[0]) if rows else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def read_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigError(f"missing artifact: {path.name}")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(rules_io._jsonable(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}: no path given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"missing {what}: {p} does not exist")
    return p


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_metadata(cfg: RunConfig) -> None:
    meta = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "versions": {
            "twostudy": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
        "seed_derivation": "SeedSequence(entropy=seed, spawn_key=(crc32(key) for string keys, int keys as is))",
    }
    write_json(_out(cfg) / "run_metadata.json", meta)


# simulate -------------------------------------------------------------------------


def run_simulate(cfg: RunConfig) -> dict:
    out = _out(cfg)
    obs_sc = default_scenario(
        "observational",
        cfg.sim_n_observational,
        seed=cfg.seed,
        dispersion=cfg.sim_dispersion,
        delta=cfg.delta,
        confounding=cfg.sim_confounding,
        confounder="prior_visits" if cfg.sim_confounding else None,
    )
    planted = default_partition(obs_sc.schema, tuple(cfg.sim_taus))
    obs_sc = dataclasses.replace(obs_sc, planted=planted)
    exp_sc = default_scenario(
        "experimental",
        cfg.sim_n_experimental,
        seed=cfg.seed + 1,
        planted=planted,
        dispersion=cfg.sim_dispersion,
        frailty=cfg.sim_frailty,
        delta=cfg.delta,
        threshold=cfg.threshold if cfg.threshold is not None else 30.0,
    )
    obs, obs_truth = generate_observational(obs_sc)
    exp, exp_truth = generate_experimental(exp_sc)
    write_schema(obs_sc.schema, out / "schema.json")
    write_csv(obs, out / "observational.csv")
    write_csv(exp, out / "experimental.csv")
    obs_truth.write_csv(out / "truth_observational.csv")
    exp_truth.write_csv(out / "truth_experimental.csv")
    rules_io.save(planted, out / "planted_rules.json")
    return {"observational": obs, "experimental": exp, "planted": planted}


# study 1 --------------------------------------------------------------------------


def _load_observational(cfg: RunConfig) -> CohortTable:
    schema = load_schema(_need(cfg.schema, "schema file"))
    return load_csv(_need(cfg.data, "observational cohort file"), schema)


def _load_panel(cfg: RunConfig) -> CohortTable:
    schema = load_schema(_need(cfg.schema, "schema file"))
    return load_csv(_need(cfg.panel, "experimental panel file"), schema, panel_mode=True)


def _study1_forest_rows(verdicts: list[StabilityVerdict]) -> list[dict]:
    rows = []
    for v in verdicts:
        for label, pair in (("training", v.train), ("validation", v.val)):
            if pair is None:
                continue
            est, se = pair
            rows.append({"leaf_id": v.leaf_id, "set": label, "estimate": est, "se": se,
                         "lo": est - 1.96 * se, "hi": est + 1.96 * se, "stability_label": v.label})
    return rows


def _ols_leaf_stats(tree: PartitionRuleTree, table: CohortTable, adjust, transform) -> dict:
    leaf_of = tree.assign(table)
    out = {}
    for lf in tree.leaves:
        m = leaf_of == lf.leaf_id
        if m.sum() < 3:
            continue
        X, y, names = design_matrix(table.subset(m), adjust, transform)
        try:
            fit = fit_ols(X, y, names)
        except (DataError, ArithmeticError):
            continue
        out[lf.leaf_id] = (fit.coef("treatment"), fit.se("treatment"))
    return out


def study1_param(cfg: RunConfig, table: CohortTable, write: bool = True) -> tuple[PartitionRuleTree, list[StabilityVerdict]]:
    """MOB on the training split, stability gate against the validation split."""
    f = cfg.param_train_fraction
    t = split(table, [("train", f), ("validation", 1 - f)], cfg.seed)
    mcfg = MobConfig(
        alpha=cfg.alpha,
        min_cluster_size=cfg.min_cluster_size,
        max_depth=cfg.max_depth,
        n_permutations=cfg.n_permutations,
        candidate_variables=tuple(cfg.candidate_variables) if cfg.candidate_variables else None,
        seed=cfg.seed,
        adjust=tuple(cfg.adjust),
        transform=cfg.outcome_transform,
    )
    diagnostics: list = []
    train, val = t.part("train"), t.part("validation")
    tree = grow(train, mcfg, diagnostics)
    train_stats = {lf.leaf_id: (lf.metadata["train_estimate"], lf.metadata["train_se"]) for lf in tree.leaves}
    val_stats = _ols_leaf_stats(tree, val, mcfg.adjust, mcfg.transform)
    tree, verdicts = gate_tree(tree, train_stats, val_stats, cfg.alpha)
    if write:
        out = _out(cfg)
        rules_io.save(tree, out / "param_rules.json")
        write_rows(out / "param_verdicts.csv", [v.row() for v in verdicts], list(StabilityVerdict.row_fields()))
        write_rows(out / "param_study1_forest.csv", _study1_forest_rows(verdicts), _FOREST_FIELDS)
        write_rows(out / "param_mob_diagnostics.csv", diagnostics,
                   ["node", "depth", "n", "variable", "score", "statistic", "p_adjusted", "selected"])
    return tree, verdicts


_FOREST_FIELDS = ["leaf_id", "set", "estimate", "se", "lo", "hi", "stability_label"]


@dataclass
class TcdResult:
    tree: PartitionRuleTree
    verdicts: list[StabilityVerdict]
    records: dict
    stats: dict
    cart: object
    forests: dict
    tuning: list


def tcd_subgroups(cfg: RunConfig, parts: dict[str, CohortTable]) -> TcdResult:
    """TCD pipeline on pre-split ``train`` / ``prediction`` / ``validation`` tables that already carry arms."""
    enc = {lab: encode(p)[0] for lab, p in parts.items()}
    ys = {lab: transform_outcome(p.outcome, cfg.outcome_transform) for lab, p in parts.items()}
    params = ForestParams(cfg.forest_trees, cfg.forest_min_node_size, cfg.forest_max_depth, cfg.forest_m_try)
    forests, tuning_rows = {}, []
    # training forests give the prediction-set TCDs; validation TCDs use forests refit on the validation third
    for src, target in (("train", "prediction"), ("validation", "validation")):
        part = parts[src]
        for a in (0, 1):
            m = part.arm == a
            p = params
            if cfg.forest_tune:
                res = tune_forest(enc[src][m], ys[src][m], default_grid(enc[src].shape[1]), cfg.forest_folds,
                                  seed=derive_seed(cfg.seed, "forest-tune", src, a), workers=cfg.workers)
                p = res.best
                tuning_rows += [{"set": src, "arm": a, **r} for r in res.table]
            forests[target, a] = fit_forest(enc[src][m], ys[src][m], p, seed=derive_seed(cfg.seed, "forest", src, a),
                                            arm=a, workers=cfg.workers)
    recs = {
        lab: compute_tcd(parts[lab].unit_id, enc[lab], ys[lab], parts[lab].arm, forests[lab, 0], forests[lab, 1], lab,
                         cfg.tcd_formula)
        for lab in ("prediction", "validation")
    }
    cart = grow_tcd_tree(recs["prediction"].gamma, parts["prediction"],
                         CartConfig(cv_folds=cfg.cart_folds, min_leaf=cfg.cart_min_leaf), seed=cfg.seed)
    tree = cart.tree
    stats = {}
    for lab in ("prediction", "validation"):
        leaf_of = tree.assign(parts[lab])
        stats[lab] = node_stats(recs[lab], leaf_of, tree.n_leaves, cfg.n_bootstrap, cfg.seed)
    as_map = lambda ss: {s.leaf_id: (s.mean_gamma, s.bootstrap_se) for s in ss}
    tree, verdicts = gate_tree(tree, as_map(stats["prediction"]), as_map(stats["validation"]), cfg.alpha)
    tree.metadata["transform"] = cfg.outcome_transform
    return TcdResult(tree, verdicts, recs, stats, cart, forests, tuning_rows)


def study1_nonparam(cfg: RunConfig, table: CohortTable, write: bool = True) -> tuple[PartitionRuleTree, list[StabilityVerdict]]:
    """Arm forests on the training third, TCD tree on the prediction third, gate on the validation third."""
    t = split(table, [("train", 1 / 3), ("prediction", 1 / 3), ("validation", 1 / 3)], cfg.seed)
    bands = (tuple(cfg.control_band), tuple(cfg.treated_band))
    parts = {lab: filter_treatment_bands(t.part(lab), *bands) for lab in ("train", "prediction", "validation")}
    res = tcd_subgroups(cfg, parts)
    tree, verdicts, recs, stats = res.tree, res.verdicts, res.records, res.stats
    if write:
        out = _out(cfg)
        rules_io.save(tree, out / "nonparam_rules.json")
        write_rows(out / "nonparam_verdicts.csv", [v.row() for v in verdicts], list(StabilityVerdict.row_fields()))
        write_rows(out / "nonparam_study1_forest.csv", _study1_forest_rows(verdicts), _FOREST_FIELDS)
        write_rows(out / "nonparam_tcd_records.csv", [r for lab in recs for r in recs[lab].rows()],
                   ["unit_id", "arm", "observed_outcome", "counterfactual_prediction", "gamma_hat", "source_set"])
        write_rows(out / "nonparam_node_stats.csv", [dataclasses.asdict(s) for lab in stats for s in stats[lab]],
                   ["leaf_id", "mean_gamma", "bootstrap_se", "n_units", "source_set"])
        write_rows(out / "nonparam_cart_cv.csv", res.cart.cv_table, ["ccp_alpha", "cv_error", "cv_se"])
        write_rows(out / "nonparam_forests.csv",
                   [{"set": k[0], "arm": k[1], **f.params.as_dict(), "oob_error": f.oob_error} for k, f in res.forests.items()],
                   ["set", "arm", "n_trees", "min_node_size", "max_depth", "m_try", "bootstrap", "oob_error"])
        if res.tuning:
            write_rows(out / "nonparam_forest_tuning.csv", res.tuning)
    return tree, verdicts


# study 2 and the causal tree --------------------------------------------------------


def _tag(tree: PartitionRuleTree) -> str:
    return METHOD_TAGS.get(tree.metadata.get("method"), "rules")


def study2(cfg: RunConfig, panel: CohortTable, tree: PartitionRuleTree, write: bool = True) -> ConfirmationTable:
    estimates = estimate_subgroups(panel, tree, cfg.threshold, cfg.min_fit_size, cfg.workers)
    table = confirm_hypotheses(estimates, tree, cfg.alpha, cfg.bonferroni)
    if write:
        out = _out(cfg)
        tag = _tag(tree)
        fields = list(estimates[0].row()) if estimates else []
        # plot data keeps one row per leaf (plus pooled); leaves left out of Study 2 carry a note only
        done = {e.leaf_id for e in estimates}
        skipped = [CausalEstimate(lf.leaf_id, float("nan"), float("nan"), 0, 0, note="excluded: noisy in Study 1")
                   for lf in tree.leaves if lf.leaf_id not in done]
        plot = sorted(estimates + skipped, key=lambda e: e.cluster)
        write_rows(out / f"{tag}_study2_estimates.csv", [e.row() for e in plot], fields)
        write_rows(out / f"{tag}_confirmation.csv", [r.row() for r in table.rows], fields)
        write_json(out / f"{tag}_confirmation.json", {"method": tree.metadata.get("method"), **table.to_dict()})
    return table


def causal_tree(cfg: RunConfig, panel: CohortTable, write: bool = True):
    units = first_differences(panel, cfg.threshold, cfg.outcome_transform)
    f = cfg.ct_validation_fraction
    units = split(units, [("train", 1 - f), ("validation", f)], cfg.seed)
    model = fit_causal_tree(
        units.part("train"), CausalTreeConfig(min_leaf=cfg.ct_min_leaf, cv_folds=cfg.ct_folds), seed=cfg.seed,
        workers=cfg.workers,
    )
    result = validate_causal_tree(model, units.part("validation"), cfg.alpha)
    if write:
        out = _out(cfg)
        rules_io.save(result.tree, out / "causal_tree_rules.json")
        write_rows(out / "causal_tree_verdicts.csv", [v.row() for v in result.verdicts], list(StabilityVerdict.row_fields()))
        write_rows(out / "causal_tree_cv.csv", model.cv_table, ["complexity", "cv_loss"])
    return result


# report -----------------------------------------------------------------------------


def report(cfg: RunConfig) -> str:
    """Table-2-shaped summary (confirmed / fail-to-reject per method) from the artifacts in ``out``."""
    out = Path(cfg.out)
    found = sorted(out.glob("*_confirmation.json")) if out.exists() else []
    ct = out / "causal_tree_verdicts.csv"
    if not found and not ct.exists():
        raise ConfigError(f"missing artifact: no confirmation tables or causal-tree verdicts in {out}")
    lines, rows = ["method          confirmed  fail-to-reject  summary"], []
    for p in found:
        doc = json.loads(p.read_text(encoding="utf-8"))
        method = p.name[: -len("_confirmation.json")]
        n = doc["hypotheses"]
        text = doc["summary"] if n else "0 transported hypotheses (no stable-high subgroups)"
        lines.append(f"{method:<15} {doc['confirmed']:>9}  {doc['fail_to_reject']:>14}  {text}")
        rows.append({"method": method, "confirmed": doc["confirmed"], "fail_to_reject": doc["fail_to_reject"],
                     "hypotheses": n, "summary": text})
    if ct.exists():
        verdicts = read_rows(ct)
        held = sum(r["label"] == "stable-high" for r in verdicts)
        text = f"{held}/{len(verdicts)} leaves hold up on validation"
        lines.append(f"{'causal_tree':<15} {held:>9}  {len(verdicts) - held:>14}  {text}")
        rows.append({"method": "causal_tree", "confirmed": held, "fail_to_reject": len(verdicts) - held,
                     "hypotheses": len(verdicts), "summary": text})
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    write_rows(out / "summary.csv", rows, ["method", "confirmed", "fail_to_reject", "hypotheses", "summary"])
    return text


# dispatch ---------------------------------------------------------------------------


def run(cfg: RunConfig) -> str:
    """Execute ``cfg.mode``; returns a one-paragraph human summary."""
    mode = cfg.mode
    if mode == "report":
        return report(cfg)
    if mode == "simulate":
        res = run_simulate(cfg)
        write_metadata(cfg)
        return f"wrote {len(res['observational'])} observational rows and {len(res['experimental'])} panel rows to {cfg.out}"
    if mode in ("study1-param", "study1-nonparam"):
        table = _load_observational(cfg)
        fn = study1_param if mode == "study1-param" else study1_nonparam
        tree, verdicts = fn(cfg, table)
        write_metadata(cfg)
        counts = {lab: sum(v.label == lab for v in verdicts) for lab in ("stable-high", "stable-low", "noisy")}
        return f"{tree.n_leaves} subgroups: " + ", ".join(f"{k} {v}" for k, v in counts.items())
    if mode == "study2":
        tree = rules_io.load(_need(cfg.rules, "rule file (run a study1 mode first or pass --rules)"))
        panel = _load_panel(cfg)
        tree.check_schema(panel.schema)
        table = study2(cfg, panel, tree)
        write_metadata(cfg)
        return table.summary()
    if mode == "causal-tree":
        result = causal_tree(cfg, _load_panel(cfg))
        write_metadata(cfg)
        return result.summary()
    # pipeline
    table = _load_observational(cfg)
    panel = _load_panel(cfg)
    for fn in (study1_param, study1_nonparam):
        tree, _ = fn(cfg, table)
        study2(cfg, panel, tree)
    causal_tree(cfg, panel)
    write_metadata(cfg)
    return report(cfg)
