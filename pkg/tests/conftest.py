import numpy as np
import pytest

from deadzone_idyn.dynamics import LinkParams, SimConfig, simulate_trajectory
from deadzone_idyn.experiment import prepare


@pytest.fixture(scope="session")
def default_log():
    """The default 180 s recording (about 3 s to simulate)."""
    return simulate_trajectory(SimConfig(), LinkParams())


@pytest.fixture(scope="session")
def prepared(default_log):
    return prepare(default_log, alpha=0.1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
