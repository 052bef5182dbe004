import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aigc_edge_sim.channel import ChannelParams
from aigc_edge_sim.genmodel import load_catalog

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture(scope="session")
def channel():
    return ChannelParams()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
