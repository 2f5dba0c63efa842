import numpy as np
import pytest

from gapscore.data.models import MaskedMatrix
from gapscore.data.rng import SeededRng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale reproduction, only with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def common_seed():
    return 20240607


@pytest.fixture
def rng(common_seed):
    return SeededRng(common_seed)


@pytest.fixture
def gaussian_matrix(common_seed):
    gen = np.random.default_rng(common_seed)
    return MaskedMatrix.from_array(gen.standard_normal((300, 4)))


@pytest.fixture
def blob_data(common_seed):
    """Two unit-variance blobs at (0, 0) and (10, 10), 1000 rows each"""
    gen = np.random.default_rng(common_seed)
    X = np.vstack((gen.standard_normal((1000, 2)), 10.0 + gen.standard_normal((1000, 2))))
    return MaskedMatrix.from_array(X)
