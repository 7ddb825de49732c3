import numpy as np
import pytest

from gpoe.networks import ModalityBatch, ModalityConfig, ModalitySpec, init_params


@pytest.fixture
def tiny_config():
    return ModalityConfig(
        input=ModalitySpec("grid", 16, "grid"),
        target=ModalitySpec("keypoints", 4, "point"),
        auxiliaries=(ModalitySpec("points", 4, "point"),),
        latent_dim=2,
        hidden_dim=8,
        alpha_hidden_dim=6,
    )


def make_batch(config, batch_size, seed=0):
    rng = np.random.default_rng(seed)
    values = {}
    for spec in (config.input, config.target) + config.auxiliaries:
        if spec.kind == "grid":
            values[spec.name] = rng.uniform(0.0, 1.0, size=(batch_size, spec.dim))
        else:
            values[spec.name] = rng.normal(0.5, 0.2, size=(batch_size, spec.dim))
    return ModalityBatch(values)


@pytest.fixture
def tiny_setup(tiny_config):
    rng = np.random.default_rng(1234)
    params = init_params(tiny_config, rng)
    batch = make_batch(tiny_config, 4, seed=7)
    return tiny_config, params, batch
