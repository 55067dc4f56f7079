import numpy as np
import pytest

from flowstraight import data, fields, nn


class PointMass:
    """Degenerate sampler used by coupling edge-case tests."""

    def __init__(self, point):
        self.point = np.asarray(point, dtype=np.float64)
        self.dim = self.point.size

    def sample(self, n, rng):
        return np.tile(self.point, (n, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def probe_net():
    """Small non-degenerate net (all layers active) for gradient tests."""
    r = np.random.default_rng(99)
    params = nn.init_mlp(2, hidden=(8, 8), n_freqs=2, rng=r)
    params.weights[-1][:] = r.normal(0.0, 0.4, params.weights[-1].shape)
    params.biases[-1][:] = r.normal(0.0, 0.1, params.biases[-1].shape)
    return params


@pytest.fixture
def gaussian_coupling():
    return fields.IndependentCoupling(
        data.GaussianIso(0.0, 1.0, dim=2), data.GaussianIso(0.0, 1.0, dim=2)
    )


@pytest.fixture
def moons_coupling():
    return fields.IndependentCoupling(
        data.GaussianIso(0.0, 1.0, dim=2), data.TwoMoons(0.08)
    )
