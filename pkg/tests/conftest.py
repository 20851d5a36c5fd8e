import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from covshift_el import data
from covshift_el import funclass as fc

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FAST_OPT = fc.OptimizerConfig(max_epochs=300)
FAST_MLP = fc.FunctionClassConfig(degree_or_width_candidates=(8,), depth_candidates=(1,), optimizer=FAST_OPT)


@pytest.fixture
def fast_mlp():
    return FAST_MLP


@pytest.fixture
def small_dataset():
    return data.generate_dataset(data.ScenarioConfig("S1", "M2", n=300, d=2, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
