import numpy as np
import pytest

from idifkin.core import FineGrid, protocol_grid
from idifkin.io import synth_bolus_idifs


@pytest.fixture(scope="session")
def grid():
    return protocol_grid()


@pytest.fixture(scope="session")
def fine(grid):
    return FineGrid.covering(grid, 0.5)


@pytest.fixture(scope="session")
def idifs(grid):
    return synth_bolus_idifs(grid, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
