import numpy as np
import pytest

from adtlab.networks import init_generator


def random_generator(seed=0, d=2, n_classes=3, hidden=16, null_token=True):
    """Small generator with a non-zero output layer, so predictions depend on inputs."""
    rng = np.random.default_rng(seed)
    gen = init_generator(d, n_classes, rng, hidden=hidden, temb_dim=8, cond_dim=4, null_token=null_token)
    gen.params["w3"] = rng.normal(0.0, 0.3, size=gen.params["w3"].shape)
    gen.params["b3"] = rng.normal(0.0, 0.1, size=gen.params["b3"].shape)
    return gen


@pytest.fixture
def small_generator():
    return random_generator()
