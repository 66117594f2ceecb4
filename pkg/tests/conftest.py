import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def finite_diff_gradient(fn, x, step=1e-6):
    """Central finite-difference gradient of a scalar or vector function."""
    x = np.asarray(x, dtype=float)
    base = np.asarray(fn(x))
    grad = np.empty(x.shape + base.shape)
    for idx in np.ndindex(x.shape):
        h = step * max(1.0, abs(x[idx]))
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        grad[idx] = (np.asarray(fn(up)) - np.asarray(fn(dn))) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / scale
