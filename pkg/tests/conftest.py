import numpy as np
import pytest

from twostudy.cohort import CohortTable, Covariate, CovariateSchema

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_table(covariates: dict, outcome, treatment, kinds: dict | None = None, levels: dict | None = None, **extra):
    kinds = kinds or {}
    levels = levels or {}
    schema = CovariateSchema(
        tuple(Covariate(n, kinds.get(n, "numeric"), tuple(levels.get(n, ()))) for n in covariates)
    )
    n = len(outcome)
    X = np.column_stack([np.asarray(v, dtype=float) for v in covariates.values()]) if covariates else np.zeros((n, 0))
    ids = extra.pop("unit_id", [f"u{i:05d}" for i in range(n)])
    return CohortTable(schema, ids, outcome, treatment, X, **extra)


@pytest.fixture
def small_schema():
    return CovariateSchema(
        (
            Covariate("age", "numeric"),
            Covariate("female", "binary"),
            Covariate("region", "categorical", ("low", "medium", "high")),
        )
    )
