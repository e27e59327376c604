import numpy as np
import pytest

from hmlab.motion_sim import make_phantom, sim_coils


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def phantom32():
    return make_phantom("shepp_logan", (32, 32))


@pytest.fixture
def coils4_32():
    return sim_coils(4, (32, 32))


# one line per acceptance criterion, shown after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
