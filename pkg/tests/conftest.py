import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def central_diff(fn, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for k in range(x.size):
        step = h * max(1.0, abs(x[k]))
        up, dn = x.copy(), x.copy()
        up[k] += step
        dn[k] -= step
        g[k] = (fn(up) - fn(dn)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture(scope="session")
def gbsg2():
    from traforest.data import load_gbsg2
    return load_gbsg2()
