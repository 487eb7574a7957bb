import numpy as np
import pytest

from quantlab.rng import make_rng
from quantlab.toymodel import ToyConfig, init_model


@pytest.fixture(scope="session")
def tiny_model():
    """Default two-layer toy model, seed 0."""
    return init_model(ToyConfig(), make_rng(0))


@pytest.fixture(scope="session")
def biased_model():
    """Same config with a magnitude-400 K-bias outlier in layer 0, channel 5."""
    return init_model(ToyConfig(), make_rng(0), k_bias_outlier=(0, 5, 400.0))


@pytest.fixture()
def rng():
    return make_rng(0)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product used as an independent oracle."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out
