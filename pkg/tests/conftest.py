import numpy as np
import pytest


def fd_grad(f, p, h=1e-4):
    """Central finite differences of a scalar function of a flat array."""
    p = np.asarray(p, dtype=float)
    g = np.zeros_like(p)
    flat = p.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        gf[i] = (f((flat + e).reshape(p.shape)) - f((flat - e).reshape(p.shape))) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
