"""Shared fixtures: tiny seeded models and synthetic datasets so the suite runs in seconds."""
import os

import numpy as np
import pytest

from src.classifier import TrainConfig, init_mlp, train
from src.dataset_io import synthetic_dataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get("VISIONGUARD_MNIST_DIR"):
        return
    skip = pytest.mark.skip(reason="set VISIONGUARD_MNIST_DIR to run MNIST acceptance checks")
    for item in items:
        if "mnist" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def blobs():
    """Three well-separated classes of 4x4 grayscale images."""
    return synthetic_dataset(n_per_class=30, num_classes=3, shape=(4, 4, 1), separation=1.2, seed=0, noise=0.05)


@pytest.fixture(scope="session")
def blobs_test():
    return synthetic_dataset(n_per_class=10, num_classes=3, shape=(4, 4, 1), separation=1.2, seed=1, noise=0.05)


@pytest.fixture(scope="session")
def trained(blobs):
    config = TrainConfig(epochs=40, batch_size=16, learning_rate=0.05, momentum=0.9, seed=0, hidden_dims=(8, 8))
    return train(blobs, config)


@pytest.fixture(scope="session")
def model(trained):
    return trained.model


@pytest.fixture
def random_model():
    """Untrained 16-6-5-3 network for gradient checks."""
    return init_mlp((16, 6, 5, 3), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
