import numpy as np
import pytest

from revar import nets
from revar.numkit import make_rng


def fd_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` at flat ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (f(x + e) - f(x - e)) / (2 * step)
    return out


def rel_err(a, b):
    """Max absolute deviation scaled by the reference's max magnitude."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_regressor(rng):
    return nets.init_net((3, 5, 1), rng, "linear", 0.3)
