import numpy as np
import pytest

from nssl.spectral import Grid


@pytest.fixture
def grid2():
    return Grid((32, 32))


@pytest.fixture
def grid3():
    return Grid((16, 16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
