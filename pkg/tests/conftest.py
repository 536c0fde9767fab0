import numpy as np
import pytest

from rtbp_diffusion.dynamics import SystemParams
from rtbp_diffusion.manifolds import homoclinic_pair, monodromy
from rtbp_diffusion.melnikov import ChannelIntegrand
from rtbp_diffusion.orbits import scan_family, solve_lyapunov

X_STAR = -0.95
KAPPA_GUESS = -0.84

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return SystemParams()


@pytest.fixture(scope="session")
def orb(params):
    return solve_lyapunov(X_STAR, KAPPA_GUESS, params)


@pytest.fixture(scope="session")
def mono(orb, params):
    return monodromy(orb, params)


@pytest.fixture(scope="session")
def pair(orb, params):
    return homoclinic_pair(orb, params)


@pytest.fixture(scope="session")
def family(params):
    return scan_family(n_nodes=5, params=params)


@pytest.fixture(scope="session")
def integrands(orb, pair, mono, params):
    return {b: ChannelIntegrand(orb, pair[b], mono, params) for b in (1, 2)}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
