"""Shared fixtures: seeded networks and tiny datasets."""

import numpy as np
import pytest

from core_net import TrainingConfig, fit
from datasets import make_prototype_images
from helpers import make_net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def softplus_net():
    return make_net([6, 8, 5, 3], beta=2.0, seed=7)


@pytest.fixture
def relu_net():
    return make_net([6, 8, 5, 3], seed=7)


@pytest.fixture(scope="session")
def tiny_images():
    """120 noisy 4x4 images over 3 classes"""
    return make_prototype_images(120, 4, 3, seed=0, noise=0.1)


@pytest.fixture(scope="session")
def trained_relu_net(tiny_images):
    config = TrainingConfig(epochs=30, lr=0.2, batch_size=16, seed=0)
    return fit(make_net([16, 12, 3], seed=3), tiny_images, config).network
