import numpy as np
import pytest

from blochwkb.blochband import band_table
from blochwkb.model import Lattice, asymmetric_potential, cosine_potential, make_periodic_potential
from blochwkb.perturb import perturb_table

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def free_V():
    return make_periodic_potential(Lattice(), {})


@pytest.fixture(scope="session")
def mathieu_V():
    return cosine_potential()


@pytest.fixture(scope="session")
def asym_V():
    return asymmetric_potential()


@pytest.fixture(scope="session")
def free_band(free_V):
    return band_table(free_V, 1, 128, 8)


@pytest.fixture(scope="session")
def mathieu_band(mathieu_V):
    return band_table(mathieu_V)


@pytest.fixture(scope="session")
def asym_band(asym_V):
    return band_table(asym_V)


@pytest.fixture(scope="session")
def asym_pert(asym_band):
    return perturb_table(asym_band)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
