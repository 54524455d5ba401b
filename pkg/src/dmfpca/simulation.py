"""Four-feature benchmark process with closed-form first derivatives.

Each subject draws ``(a, b, c)`` from a fixed trivariate normal law and
observes four curves on ``[0, 1]``. Randomness is split into independent
substreams keyed by ``(replication, purpose, subject, feature)`` so that
results do not depend on the order in which replications run, and
changing the noise level leaves parameters and timepoints untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from dmfpca.errors import InvalidArgumentError
from dmfpca.fdata import DenseCurves, FunctionalSample, make_uniform_grid
from dmfpca.mfpca import MultivariateEigenSystem, MultivariateScores, dense_mfpca

PARAM_MEAN = np.array([0.0, 0.5, 3.75])
PARAM_COV = np.array([
    [1.00, 0.11, 0.56],
    [0.11, 0.02, 0.08],
    [0.56, 0.08, 0.49],
])
PARAM_CHOL = np.linalg.cholesky(PARAM_COV)

N_FEATURES = 4
DEFAULT_SEED = 20240501

# substream purposes
_PARAMS, _COUNTS, _TIMES, _NOISE = range(4)


@dataclass(frozen=True)
class SimParams:
    a: float
    b: float
    c: float


def eval_functions(params: SimParams, t) -> np.ndarray:
    """The four curves at ``t``; returns shape ``(4,) + shape(t)``."""
    a, b, c = params.a, params.b, params.c
    t = np.asarray(t, dtype=float)
    x1 = a + 5.0 / (c * t + 10.0 * b * np.exp(-16.0 * t))
    x2 = a + c * np.sin(np.pi * (b + t)) ** 3
    x3 = a - np.cos(c * t / 4.0 * (2.0 * t - np.pi)) + 6.0 * np.exp(-16.0 * b * t**2)
    x4 = a + 2.0 * c * np.exp(-14.0 * t) + 2.0 * np.exp(2.0 * (t - b))
    return np.stack([x1, x2, x3, x4])


def eval_derivatives(params: SimParams, t) -> np.ndarray:
    """First derivatives of :func:`eval_functions` in closed form."""
    a, b, c = params.a, params.b, params.c
    t = np.asarray(t, dtype=float)
    e16 = np.exp(-16.0 * t)
    d1 = (32.0 * b * e16 - c / 5.0) / (c * t / 5.0 + 2.0 * b * e16) ** 2
    u = np.pi * (b + t)
    d2 = 3.0 * c * np.pi * np.cos(u) * np.sin(u) ** 2
    d3 = (c * t - c * np.pi / 4.0) * np.sin(c * t / 4.0 * (2.0 * t - np.pi)) - 192.0 * b * t * np.exp(-16.0 * b * t**2)
    d4 = -28.0 * c * np.exp(-14.0 * t) + 4.0 * np.exp(2.0 * (t - b))
    return np.stack([d1, d2, d3, d4])


SETTINGS = {
    "dense-clean": dict(sigma=0.0, m_range=None),
    "dense-noisy": dict(sigma=0.5, m_range=None),
    "sparse-medium": dict(sigma=0.5, m_range=(50, 60)),
    "sparse-high": dict(sigma=0.5, m_range=(10, 20)),
}


@dataclass(frozen=True)
class SimSetting:
    """One benchmark configuration.

    ``m_range=None`` observes every grid point; otherwise each (subject,
    feature) sees a uniformly drawn number of distinct grid points in the
    inclusive range.
    """

    label: str
    sigma: float
    m_range: tuple | None
    n_subjects: int = 100
    n_grid: int = 101
    replications: int = 50
    seed: int = DEFAULT_SEED

    @classmethod
    def named(cls, label: str, **overrides) -> "SimSetting":
        if label not in SETTINGS:
            raise InvalidArgumentError(f"unknown setting {label!r}; choose from {sorted(SETTINGS)}")
        return replace(cls(label, **SETTINGS[label]), **overrides)

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be >= 0")
        if self.m_range is not None:
            lo, hi = self.m_range
            if not 1 <= lo <= hi <= self.n_grid:
                raise InvalidArgumentError(f"invalid observation-count range {self.m_range}")
            object.__setattr__(self, "m_range", (int(lo), int(hi)))


@dataclass(frozen=True, eq=False)
class TruthBundle:
    """Noise-free curves, their derivatives, and the derivative eigensystem.

    The eigensystem is MFPCA (``K`` components) of the cross-sectionally
    centred true derivatives; ``scores`` are their projections.
    """

    params: tuple
    functions: DenseCurves
    derivatives: DenseCurves
    eigen: MultivariateEigenSystem
    scores: MultivariateScores
    mean_derivative: DenseCurves


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def draw_params(seed: int, replication: int, subject: int, grid_points=None) -> SimParams:
    """Parameters of one subject, redrawn if any curve is non-finite on the grid."""
    rng = _rng(seed, replication, _PARAMS, subject)
    t = np.linspace(0, 1, 101) if grid_points is None else grid_points
    for _ in range(1000):
        a, b, c = PARAM_MEAN + PARAM_CHOL @ rng.standard_normal(3)
        p = SimParams(float(a), float(b), float(c))
        den = c * t + 10.0 * b * np.exp(-16.0 * t)
        if np.all(np.abs(den) > 1e-3) and np.all(np.isfinite(eval_derivatives(p, t))):
            return p
    raise RuntimeError("could not draw admissible parameters")


def generate(setting: SimSetting, replication: int, K: int = 3, truth_components=0.9999):
    """Draw one replication of ``setting``.

    Returns
    -------
    sample : FunctionalSample
    truth : TruthBundle
    """
    if replication < 0:
        raise InvalidArgumentError("replication must be >= 0")
    grid = make_uniform_grid((0.0, 1.0), setting.n_grid)
    seed = setting.seed
    N = setting.n_subjects
    params = [draw_params(seed, replication, i, grid.points) for i in range(N)]
    funcs = np.stack([eval_functions(p, grid.points) for p in params])  # N x P x G
    derivs = np.stack([eval_derivatives(p, grid.points) for p in params])

    times, values = [], []
    for i in range(N):
        trow, yrow = [], []
        for p in range(N_FEATURES):
            if setting.m_range is None:
                idx = np.arange(setting.n_grid)
            else:
                lo, hi = setting.m_range
                m = int(_rng(seed, replication, _COUNTS, i, p).integers(lo, hi + 1))
                idx = np.sort(_rng(seed, replication, _TIMES, i, p).choice(setting.n_grid, size=m, replace=False))
            noise = _rng(seed, replication, _NOISE, i, p).standard_normal(idx.size)
            trow.append(grid.points[idx])
            yrow.append(funcs[i, p, idx] + setting.sigma * noise)
        times.append(trow)
        values.append(yrow)
    sample = FunctionalSample([str(i) for i in range(N)], [(0.0, 1.0)] * N_FEATURES, times, values)

    grids = [grid] * N_FEATURES
    fcurves = DenseCurves(grids, [funcs[:, p] for p in range(N_FEATURES)])
    dcurves = DenseCurves(grids, [derivs[:, p] for p in range(N_FEATURES)])
    eig, scores, mean = dense_mfpca(dcurves, K, truth_components, center=True, d=1)
    truth = TruthBundle(tuple(params), fcurves, dcurves, eig, scores, mean)
    return sample, truth
