import numpy as np
import pytest
from hypothesis import settings

from fastslow.policy import PolicyDims, init_params
from fastslow.scenario import PRESETS

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture
def highway_cfg():
    return PRESETS["highway"]


@pytest.fixture
def merge_cfg():
    return PRESETS["merge"]


@pytest.fixture
def two_way_cfg():
    return PRESETS["two_way"]


@pytest.fixture(scope="session")
def small_dims():
    return PolicyDims(d_model=16, n_heads=2, n_blocks=2, ffn_mult=2)


@pytest.fixture(scope="session")
def small_params(small_dims):
    return init_params(np.random.default_rng(7), small_dims)
