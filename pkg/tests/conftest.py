import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gaussian(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


@pytest.fixture
def tiny_model():
    """2 layers x 2 maps, hidden 12, 4 iterations, k=2."""
    from bitstack import harness

    net = harness.build_reference_network(harness.NetworkConfig(2, 2, 12), seed=5)
    calib = harness.make_calibration(48, 12, seed=6)
    stacks, scalings = harness.compress_network(net, calib, n_iters=4, k=2)
    return net, calib, stacks, scalings
