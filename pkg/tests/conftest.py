import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robustkb.model import TimeGrid, scalar_model

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def grid200():
    return TimeGrid(1.0, 200)


@pytest.fixture
def scalar200(grid200):
    return scalar_model(grid200)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
