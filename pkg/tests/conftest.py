import sys

import numpy as np
import pytest

from korisk.harness import SweepConfig, run_sweep
from korisk.models import Dataset
from korisk.tomo import ForwardModel, Geometry


class ConstantRng:
    """Stand-in stream that returns the same uniform for every draw."""

    def __init__(self, u):
        self.u = u

    def uniform(self, low=0.0, high=1.0):
        return low + self.u * (high - low)

    def below(self, n):
        return min(int(self.u * n), n - 1)


@pytest.fixture
def constant_rng():
    return ConstantRng


@pytest.fixture(scope="session")
def model8():
    return ForwardModel.build(Geometry.surrogate(8))


@pytest.fixture(scope="session")
def data8(model8):
    return Dataset.from_seed(11, 48, model8)


@pytest.fixture(scope="session")
def default_sweep():
    """The default CPU sweep (H in 8, 16, 32), shared by the slow tests."""
    return run_sweep(SweepConfig(h=(8, 16, 32)))


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.format_line(number))
