"""Mean, covariance and derivative-covariance estimation for one feature.

The covariance of feature ``p`` is estimated by a tensor-product P-spline
fitted to the pooled cross-products ``y_i(s) y_i(t)`` of centred data. When
measurement noise is assumed the diagonal pairs ``s = t`` (same observation)
are left out, because their expectation is ``C(t, t) + sigma^2``. Raw
products from all subjects get equal weight, so the fit targets the
conditional mean of the products; the ``1/(N-1)`` factor of the empirical
estimator does not appear.

Mixed partials ``d^d/ds^d d^d/dt^d C`` estimate the covariance of the
``d``-th derivative process, and ``d^d/ds^d C`` estimates
``Cov(X^(d)(s), X(t))``. Both are read off the same fitted surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmfpca.errors import InvalidArgumentError
from dmfpca.fdata import DenseCurves, FunctionalSample, Grid
from dmfpca.pspline import SplineConfig, SurfaceFit, SurfaceSystem, eval_derivative, select_lambda_cv


@dataclass(frozen=True, eq=False)
class CovarianceSurface:
    """``d^d d^d C`` of one feature tabulated on ``grid x grid``."""

    feature: int
    grid: Grid
    values: np.ndarray
    d: int = 0
    sigma2: float = 0.0
    lam: float = float("nan")

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        n = len(self.grid)
        if v.shape != (n, n):
            raise InvalidArgumentError(f"surface must be {n}x{n}, got {v.shape}")
        if not np.allclose(v, v.T, rtol=0.0, atol=1e-8 * max(1.0, np.abs(v).max(initial=0.0))):
            raise InvalidArgumentError("covariance surface must be symmetric")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class CrossOrderSurface:
    """``d^d/ds^d C(s, t)`` of one feature; rows index ``s``, columns ``t``."""

    feature: int
    grid: Grid
    values: np.ndarray
    d: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        n = len(self.grid)
        if v.shape != (n, n):
            raise InvalidArgumentError(f"surface must be {n}x{n}, got {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def fit_mean(sample: FunctionalSample, config: SplineConfig | None = None) -> list:
    """One P-spline per feature fitted to the pooled observations."""
    config = config or SplineConfig()
    fits = []
    for p in range(sample.n_features):
        t, y = sample.pooled(p)
        fits.append(config.fit(t, y, sample.domains[p]))
    return fits


def estimate_mean(sample: FunctionalSample, grids, config: SplineConfig | None = None, d: int = 0) -> DenseCurves:
    """Pooled P-spline mean of each feature (or its ``d``-th derivative) on ``grids``."""
    fits = fit_mean(sample, config)
    return tabulate_fits(fits, grids, d)


def tabulate_fits(fits, grids, d: int = 0) -> DenseCurves:
    return DenseCurves(grids, [eval_derivative(f, g, d)[None, :] for f, g in zip(fits, grids)])


def raw_cross_products(sample: FunctionalSample, feature: int, include_diagonal: bool = False,
                       with_subject: bool = False):
    """All within-subject ordered pairs ``(s, t, y(s) y(t))`` of one feature.

    Returns
    -------
    s, t, values : ndarray
        Flat arrays of equal length. A subject with ``M`` observations
        contributes ``M (M - 1)`` pairs, or ``M^2`` with the diagonal.
    subject : ndarray
        Subject index of every pair; only when ``with_subject``.
    """
    ss, tt, vv, ii = [], [], [], []
    for i in range(sample.n_subjects):
        ti = sample.times[i][feature]
        yi = sample.values[i][feature]
        m = ti.size
        if m == 0:
            continue
        S = np.broadcast_to(ti[:, None], (m, m))
        T = np.broadcast_to(ti[None, :], (m, m))
        V = np.outer(yi, yi)
        if include_diagonal:
            keep = np.ones((m, m), dtype=bool)
        else:
            keep = ~np.eye(m, dtype=bool)
        ss.append(S[keep])
        tt.append(T[keep])
        vv.append(V[keep])
        ii.append(np.full(vv[-1].size, i))
    if not ss:
        empty = (np.empty(0), np.empty(0), np.empty(0))
        return empty + (np.empty(0, dtype=int),) if with_subject else empty
    out = (np.concatenate(ss), np.concatenate(tt), np.concatenate(vv))
    return out + (np.concatenate(ii),) if with_subject else out


class CovarianceModel:
    """Symmetrised P-spline covariance surface of one centred feature.

    Fitting happens once at construction; the ``*_surface`` methods tabulate
    different partial derivatives of the same fit.
    """

    def __init__(self, sample: FunctionalSample, feature: int, config: SplineConfig | None = None,
                 assume_noise: bool = True):
        self.feature = feature
        self.config = config or SplineConfig()
        self.assume_noise = assume_noise
        self.sample = sample
        cfg = self.config
        basis = cfg.basis(sample.domains[feature], surface=True)
        s, t, v, subj = raw_cross_products(sample, feature, include_diagonal=not assume_noise, with_subject=True)
        system = SurfaceSystem.build(s, t, v, basis, basis, cfg.penalty_order)
        n_with_data = np.unique(subj).size
        if cfg.lam is not None:
            lam = cfg.lam
        elif cfg.surface_selector == "cv" and n_with_data >= cfg.cv_folds:
            # subjects, not products, are the independent units
            rank = np.unique(subj, return_inverse=True)[1]
            fold = rank % cfg.cv_folds
            folds = [
                SurfaceSystem.build(s[fold == f], t[fold == f], v[fold == f], basis, basis, cfg.penalty_order)
                for f in range(cfg.cv_folds)
            ]
            lam = select_lambda_cv(folds, cfg.lambda_grid)
        else:
            lam = system.select_lambda(cfg.lambda_grid)
        fit = system.solve(lam, lam)
        coef = 0.5 * (fit.coefficients + fit.coefficients.T)
        self.lam = float(lam)
        self.fit = SurfaceFit(basis, basis, coef, lam, lam, self.config.penalty_order)
        self.sigma2 = self._sigma2() if assume_noise else 0.0

    def _sigma2(self) -> float:
        t, y = self.sample.pooled(self.feature)
        if t.size == 0:
            return 0.0
        # the middle half of the domain avoids boundary bias of the surface
        lo, hi = self.sample.domains[self.feature]
        mid = (t >= lo + 0.25 * (hi - lo)) & (t <= hi - 0.25 * (hi - lo))
        if mid.any():
            t, y = t[mid], y[mid]
        B = self.fit.basis_s.design(t)
        diag = np.einsum("ij,jk,ik->i", B, self.fit.coefficients, B)
        return float(max(np.mean(y * y - diag), 0.0))

    def covariance(self, grid: Grid, d: int = 0) -> CovarianceSurface:
        values = self.fit(grid.points, grid.points, d, d)
        values = 0.5 * (values + values.T)
        return CovarianceSurface(self.feature, grid, values, d, self.sigma2 if d == 0 else 0.0, self.lam)

    def cross_order(self, grid: Grid, d: int) -> CrossOrderSurface:
        return CrossOrderSurface(self.feature, grid, self.fit(grid.points, grid.points, d, 0), d)


def estimate_covariance(sample: FunctionalSample, feature: int, grid: Grid, config: SplineConfig | None = None,
                        d: int = 0, assume_noise: bool = True) -> CovarianceSurface:
    """Smoothed ``d^d d^d C`` of one feature of a centred sample."""
    config = config or SplineConfig()
    if d > config.degree:
        raise InvalidArgumentError(f"derivative order {d} exceeds spline degree {config.degree}")
    return CovarianceModel(sample, feature, config, assume_noise).covariance(grid, d)


def estimate_cross_order(sample: FunctionalSample, feature: int, grid: Grid, config: SplineConfig | None = None,
                         d: int = 0, assume_noise: bool = True) -> CrossOrderSurface:
    """Smoothed ``d^d/ds^d C(s, t)`` of one feature of a centred sample."""
    config = config or SplineConfig()
    if d > config.degree:
        raise InvalidArgumentError(f"derivative order {d} exceeds spline degree {config.degree}")
    return CovarianceModel(sample, feature, config, assume_noise).cross_order(grid, d)


def estimate_sigma2(sample: FunctionalSample, feature: int, grid: Grid | None = None,
                    config: SplineConfig | None = None) -> float:
    """Noise variance from the gap between raw squares and the smoothed diagonal.

    The gap is averaged over observations in the middle half of the domain
    (all observations if there are none), floored at zero.

    ``grid`` is accepted for interface symmetry; the diagonal is evaluated
    at the observed timepoints directly.
    """
    return CovarianceModel(sample, feature, config, assume_noise=True).sigma2


def empirical_covariance(curves: np.ndarray, grid: Grid, feature: int = 0, center: bool = False) -> CovarianceSurface:
    """Covariance ``X^T X / (N - 1)`` of dense curves (rows) on ``grid``."""
    X = np.asarray(curves, dtype=float)
    if X.shape[0] < 2:
        raise InvalidArgumentError("at least two curves are needed for a covariance")
    if center:
        X = X - X.mean(axis=0)
    return CovarianceSurface(feature, grid, X.T @ X / (X.shape[0] - 1))
