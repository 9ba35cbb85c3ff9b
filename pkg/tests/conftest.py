import numpy as np
import pytest

from qttfactor.panel import PanelData


def rank_panel(N=30, T=40, r=2, seed=0, delta=0.7, T0=None, noise=0.0):
    """Exact low-rank panel; treated unit 1 gets ``delta`` after ``T0``."""
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((T, r))
    L = rng.standard_normal((N + 1, r)) + 1.0
    Y = L @ F.T + noise * rng.standard_normal((N + 1, T))
    T0 = T // 2 if T0 is None else T0
    Y[0, T0:] += delta
    return PanelData(Y, (1,), T0 + 1), F, L


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
