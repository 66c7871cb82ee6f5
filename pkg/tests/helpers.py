"""Test helpers: closed-form networks and numerical derivatives."""

import numpy as np

from core_net import Activation, DenseLayer, Network, init_network


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function"""
    x = np.asarray(x, dtype=np.float64)
    gradient = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = eps
        gradient.flat[i] = (f(x + step) - f(x - step)) / (2 * eps)
    return gradient


def make_net(sizes, beta=None, seed=0) -> Network:
    activation = Activation.relu() if beta is None else Activation.softplus(beta)
    return init_network(sizes, activation, seed)


def linear_net(W: np.ndarray, b=None) -> Network:
    """Single affine layer, so every explanation has a closed form"""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return Network((DenseLayer(W, b),), Activation.relu(), W.shape[0])


def positive_net(sizes, seed=0, beta=None) -> Network:
    """All weights and biases strictly positive"""
    rng = np.random.default_rng(seed)
    layers = tuple(DenseLayer(rng.uniform(0.1, 1.0, size=(n_out, n_in)), rng.uniform(0.01, 0.1, size=n_out))
                   for n_in, n_out in zip(sizes[:-1], sizes[1:]))
    activation = Activation.relu() if beta is None else Activation.softplus(beta)
    return Network(layers, activation, sizes[-1])
