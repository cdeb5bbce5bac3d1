import time

import numpy as np
import pytest

from planarion import equilibrium as eq
from planarion.trapmath import PotentialSpec

# trap settings used throughout the tests (Hz)
CENSUS_FREQS = (2196e3, 680e3, 343e3)
LARGE_FREQS = (2188e3, 528e3, 248e3)
ANISO_FREQS = (2200e3, 742e3, 370e3)
SMALL_FREQS = (2120e3, 720e3, 370e3)

SWEEP_XI = (1.90, 1.915, 1.95, 1.987, 2.02, 2.06)
SWEEP_RUNS = 200

ACCEPTANCE_LINES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance or integration test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def census_spec():
    return PotentialSpec.from_hz(*CENSUS_FREQS)


@pytest.fixture(scope="session")
def small_spec():
    return PotentialSpec.from_hz(*SMALL_FREQS)


@pytest.fixture(scope="session")
def crystal8(small_spec):
    return eq.anneal(8, small_spec, eq.AnnealSchedule(seed=1))


@pytest.fixture(scope="session")
def crystal91(census_spec):
    return eq.anneal(91, census_spec, eq.AnnealSchedule(seed=0))


@pytest.fixture(scope="session")
def sweep(census_spec):
    """Gap curve for 91 ions over the anisotropy window, with its wall time."""
    t0 = time.perf_counter()
    curve = eq.anisotropy_sweep(91, census_spec, SWEEP_XI, SWEEP_RUNS)
    return curve, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
