import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from jointrecon import Grid, fit_detector  # noqa: E402
from jointrecon.projector import set_threads  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# deterministic kernels for the whole suite
set_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return Grid((8, 8, 8), (1.0, 1.0, 1.0))


@pytest.fixture
def small_geometry(small_grid):
    return fit_detector(small_grid, 3, (-25, 25))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(LINES):
            terminalreporter.write_line(line)
