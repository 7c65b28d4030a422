import numpy as np
import pytest

from sdnid.data import Pair, Signal


def central_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Elementwise central finite differences of a scalar function of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def first_order_pair(K=1500, Ts=1.0, a=0.1, b=0.1, seed=0, noise=0.0):
    """ZOH samples of dx/dt = -a x + b u with white input; y = x (+ noise)."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=K)
    ad = np.exp(-a * Ts)
    bd = b / a * (1 - ad)
    x = np.zeros(K)
    for k in range(K - 1):
        x[k + 1] = ad * x[k] + bd * u[k]
    y = x + noise * rng.normal(size=K)
    return Pair(Signal(u, Ts), Signal(y, Ts)), x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
