"""Command-line entry point: ``twostudy <subcommand> [flags]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .errors import ConfigError, DataError, NumericalError
from .runner import MODES, RunConfig, run

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

HELP = {
    "simulate": "generate a synthetic observational cohort, experimental panel and truth records",
    "study1-param": "model-based partitioning and stability gate on an observational cohort",
    "study1-nonparam": "forest TCD tree and stability gate on an observational cohort",
    "study2": "transport a rule file to the experimental panel and test each subgroup",
    "causal-tree": "honest causal-tree baseline on the experimental panel alone",
    "pipeline": "both Study 1 methods, Study 2 for each rule file, the causal tree and the report",
    "report": "summarize confirmation tables in an output directory",
}


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of configuration keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--data", help="observational cohort CSV")
    common.add_argument("--panel", help="experimental panel CSV")
    common.add_argument("--schema", help="covariate schema JSON")
    common.add_argument("--rules", help="rule file for study2")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")

    parser = argparse.ArgumentParser(prog="twostudy", description="Two-study subgroup discovery and confirmation.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sub.add_parser(mode, parents=[common], help=HELP[mode])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"missing config file: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
    cli = {k: getattr(args, k) for k in ("seed", "alpha", "out", "workers", "data", "panel", "schema", "rules")}
    cli.update(_parse_set(args.set))
    cli["mode"] = args.mode
    return RunConfig.from_sources(file_values, cli)


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "twostudy"
    for frame, _ in traceback.walk_tb(tb):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("twostudy."):
            name = mod
    return name


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        print(run(cfg))
        return EXIT_OK
    except (ConfigError, DataError, NumericalError) as exc:
        code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_DATA if isinstance(exc, DataError) else EXIT_NUMERICAL
        print(f"error [{_origin(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
