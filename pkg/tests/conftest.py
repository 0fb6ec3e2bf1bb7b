import pytest

from src.schedule import NoiseSchedule, make_grid
from src.worlds import AnalyticWorld, ExactOracle, PerturbedOracle


@pytest.fixture
def ve():
    return NoiseSchedule.ve()


@pytest.fixture
def vp():
    return NoiseSchedule.vp()


@pytest.fixture
def toy():
    return AnalyticWorld.toy()


@pytest.fixture
def exact(toy, ve):
    return ExactOracle(toy, ve)


@pytest.fixture
def perturbed(exact):
    return PerturbedOracle(exact, 0.1)


@pytest.fixture
def world3():
    return AnalyticWorld(3, [1.0, 0.5, 2.0], [0.2, -1.0, 0.0], [1.0, 3.0, 0.25])


@pytest.fixture
def small_grid():
    return make_grid(9.0, 8)


@pytest.fixture
def sigma_grid():
    return make_grid(9.0, 64, spacing="sigma")
