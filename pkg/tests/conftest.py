import numpy as np
import pytest

from nfcodebook.channel import Scenario, UserArea, generate_batch
from nfcodebook.geometry import ArrayGeometry

_CRITERIA: list[str] = []


@pytest.fixture
def criterion_report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def geom9():
    return ArrayGeometry(3, 3)


@pytest.fixture
def near_scenario():
    # 3x3 array at lambda = 1 cm has a 4 cm Rayleigh distance
    return Scenario((UserArea.from_degrees(-40, 40, 0.01, 0.035),), 2, name="near")


@pytest.fixture
def small_batch(geom9, near_scenario):
    return generate_batch(geom9, near_scenario, 2, np.random.default_rng(0))
