import numpy as np
import pytest

from coagents.fixtures import default_gridworld, two_bit_network


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid():
    return default_gridworld()


@pytest.fixture(scope="session")
def bit_net():
    return two_bit_network(0.5)
