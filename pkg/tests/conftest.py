import numpy as np
import pytest

from stimpute.geometry import build_icosphere
from stimpute.model import ModelConfig


@pytest.fixture(scope="session")
def ico():
    """12-node icosahedron."""
    return build_icosphere(0)


@pytest.fixture(scope="session")
def sphere42():
    return build_icosphere(1)


@pytest.fixture(scope="session")
def sphere162():
    return build_icosphere(2)


@pytest.fixture
def tiny_config():
    return ModelConfig(d=4, q=2, r=2, enc_hidden=4, dec_hidden=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
