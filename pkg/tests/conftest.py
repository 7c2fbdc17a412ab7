import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fatnn.model import ModelConfig, init_model

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_cp():
    return init_model(ModelConfig("cp", 3, 4, hidden=(5,), activation="trigblend", m=3, sigma=1.0), 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
