import numpy as np
import pytest

from magsr.simkit import SkinConfig


@pytest.fixture
def cfg():
    return SkinConfig(noise_std=0.0)


@pytest.fixture
def small_cfg():
    return SkinConfig(image_size=16, dipole_grid=16, noise_std=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line[1])
