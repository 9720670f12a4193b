import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vlncache import _accel, kernels

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])


@pytest.fixture(params=BACKENDS)
def each_backend(request):
    """Run the test once per kernel backend, restoring the default afterwards."""
    before = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(before)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
