import time

import pytest

from lrppo.pipeline import ExperimentConfig, train_all

SEEDS = (0, 1, 2)
ACCEPTANCE_LINES = []


class Runs(dict):
    """Per-seed run results plus the wall time spent producing them."""

    seconds = 0.0


@pytest.fixture(scope="session")
def default_runs():
    """Stage 1 -> 3 on the default synthetic transfer data for three seeds."""
    start = time.perf_counter()
    runs = Runs((seed, train_all(ExperimentConfig(seed=seed))) for seed in SEEDS)
    runs.seconds = time.perf_counter() - start
    return runs


@pytest.fixture
def acceptance_report():
    def report(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
