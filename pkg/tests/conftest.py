import numpy as np
import pytest

from fedlocal import quadratic_problem


@pytest.fixture
def two_quad():
    """Two isotropic quadratics with minimisers (1,0) and (-1,0), uniform weights."""
    return quadratic_problem([[1.0, 0.0], [-1.0, 0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(f, w, h=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g
