import numpy as np
import pytest

from vaeguard.datasets import generate_synthetic, train_test_split
from vaeguard.vae import TrainConfig, init_model, train


@pytest.fixture(scope="session")
def synthetic():
    data = generate_synthetic(0, 60, 4, 14)
    return train_test_split(data, 0.25, 0)


@pytest.fixture(scope="session")
def small_model(synthetic):
    """A briefly trained narrow VAE; good enough for shape, gradient and plumbing tests."""
    train_set, _ = synthetic
    model = init_model(train_set.dim, 4, (32, 16), seed=1)
    return train(model, train_set, TrainConfig(epochs=3, batch_size=32, seed=2)).model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
