import numpy as np
import pytest

from areal_ssm.spatial_graph import RegionGraph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def path3():
    return RegionGraph.path(3)


def star(leaves=3):
    """Region 0 joined to every other region."""
    return RegionGraph.from_edges(leaves + 1, [(0, k) for k in range(1, leaves + 1)])


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
