import numpy as np
import pytest

from batchloop.lifted_model import linearize_nominal
from batchloop.rto import RtoConfig, optimize_nominal


@pytest.fixture(scope="session")
def nominal():
    return optimize_nominal(RtoConfig())


@pytest.fixture(scope="session")
def lifted(nominal):
    return linearize_nominal(nominal)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def add(criterion: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
