"""Shared pytest fixtures for the eigensde test suite."""

import numpy as np
import pytest
import torch

from eigensde.esde import ControlSegment, GaussianBelief
from eigensde.spectral import random_spectral_dynamics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mixed_dynamics(rng):
    """4-dim regime with two real eigenvalues and one conjugate pair, m=2, k=2."""
    return random_spectral_dynamics(rng, 4, n_complex=1, m=2, k=2)


@pytest.fixture
def random_belief(rng):
    def make(n, t=0.0):
        L = rng.normal(size=(n, n))
        return GaussianBelief(rng.normal(size=n), L @ L.T / n + 0.1 * np.eye(n), t)
    return make


@pytest.fixture
def gapped_schedule():
    """Two control segments with an uncovered span between them."""
    return [
        ControlSegment(0.0, 0.7, [0.5, -1.0]),
        ControlSegment(1.2, 2.0, [-0.3, 0.8]),
    ]


@pytest.fixture
def central_difference():
    """Central finite-difference gradient of a scalar function of a float64 tensor."""
    def gradient(fn, x, eps=1e-6):
        x = x.detach().clone()
        grad = torch.zeros_like(x)
        flat = x.reshape(-1)
        out = grad.reshape(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + eps
            up = float(fn(x))
            flat[i] = original - eps
            down = float(fn(x))
            flat[i] = original
            out[i] = (up - down) / (2 * eps)
        return grad
    return gradient
