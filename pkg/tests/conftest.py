import numpy as np
import pytest

from dmfpca.fdata import DenseCurves, FunctionalSample, make_uniform_grid


def kl_curves(n, grid, funcs, sds, rng):
    """Curves ``sum_k z_k f_k`` with independent ``z_k ~ N(0, sd_k^2)``."""
    Z = rng.standard_normal((n, len(funcs))) * np.asarray(sds)
    F = np.stack([f(grid.points) for f in funcs])
    return Z, Z @ F


def dense_sample(values_per_feature, grid, ids=None):
    n = values_per_feature[0].shape[0]
    P = len(values_per_feature)
    ids = [str(i) for i in range(n)] if ids is None else ids
    times = [[grid.points for _ in range(P)] for _ in range(n)]
    values = [[values_per_feature[p][i] for p in range(P)] for i in range(n)]
    return FunctionalSample(ids, [grid.domain] * P, times, values)


# orthonormal on [0, 1]
E1 = lambda t: np.sqrt(2) * np.sin(np.pi * t)
E2 = lambda t: np.sqrt(2) * np.sin(2 * np.pi * t)
E3 = lambda t: np.sqrt(2) * np.sin(3 * np.pi * t)


@pytest.fixture
def grid51():
    return make_uniform_grid((0.0, 1.0), 51)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
