"""Univariate functional PCA on a tabulated covariance surface.

The integral eigenproblem ``int C(s, t) phi(t) dt = lambda phi(s)`` is
discretised with the grid's quadrature weights ``W`` and solved in its
symmetric form ``W^1/2 C W^1/2 u = lambda u``, ``phi = W^-1/2 u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dmfpca.covariance import CovarianceSurface, CrossOrderSurface
from dmfpca.errors import InvalidArgumentError
from dmfpca.fdata import DenseCurves, FunctionalSample, Grid, integrate

SYMMETRY_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class UnivariateEigenSystem:
    """Leading eigenpairs of one feature's (derivative) covariance.

    ``eigenfunctions`` has one row per component, tabulated on ``grid``.
    ``total_variance`` is the mass of all positive eigenvalues, retained or
    not; ``clipped_mass`` is the magnitude of the negative ones dropped.
    """

    feature: int
    d: int
    grid: Grid
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    pve: float
    total_variance: float
    clipped_mass: float = 0.0

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size


@dataclass(frozen=True, eq=False)
class UnivariateScores:
    feature: int
    d: int
    scores: np.ndarray
    ridge_subjects: tuple = field(default=())


def _select(eigenvalues: np.ndarray, n_components) -> int:
    n_pos = int(np.sum(eigenvalues > 0))
    if n_pos == 0:
        return 0
    if isinstance(n_components, (int, np.integer)) and not isinstance(n_components, bool):
        if n_components < 1:
            raise InvalidArgumentError("a fixed number of components must be >= 1")
        return min(int(n_components), n_pos)
    thr = float(n_components)
    if not 0 < thr <= 1:
        raise InvalidArgumentError(f"PVE threshold must be in (0, 1], got {thr}")
    cum = np.cumsum(eigenvalues[:n_pos]) / eigenvalues[:n_pos].sum()
    return min(int(np.searchsorted(cum, thr - 1e-12) + 1), n_pos)


def orient(phi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Flip rows so each has a nonnegative integral, else a positive first nonzero value."""
    phi = np.array(phi, dtype=float, copy=True)
    for k in range(phi.shape[0]):
        mass = phi[k] @ weights
        if abs(mass) > 1e-10:
            flip = mass < 0
        else:
            nz = np.flatnonzero(np.abs(phi[k]) > 1e-12)
            flip = nz.size > 0 and phi[k, nz[0]] < 0
        if flip:
            phi[k] = -phi[k]
    return phi


def eigendecompose(surface: CovarianceSurface, n_components=0.99) -> UnivariateEigenSystem:
    """Quadrature-weighted eigendecomposition of a covariance surface.

    Parameters
    ----------
    surface : CovarianceSurface
        Symmetric surface on a grid.
    n_components : int or float
        A fixed number of components, or a PVE threshold in ``(0, 1]``.

    Notes
    -----
    Negative eigenvalues (differentiated surfaces need not be positive
    semi-definite) are dropped; their total magnitude is reported as
    ``clipped_mass``.
    """
    C = np.asarray(surface.values, dtype=float)
    scale = max(np.abs(C).max(), 1e-300)
    if np.abs(C - C.T).max() > SYMMETRY_TOL * scale:
        raise InvalidArgumentError("covariance surface is not symmetric")
    C = 0.5 * (C + C.T)
    w = surface.grid.weights
    sw = np.sqrt(w)
    lam, U = np.linalg.eigh(sw[:, None] * C * sw[None, :])
    lam, U = lam[::-1], U[:, ::-1]
    positive = lam > 0
    total = float(lam[positive].sum())
    clipped = float(-lam[~positive].sum())
    k = _select(lam, n_components)
    with np.errstate(divide="ignore"):
        phi = (U[:, :k] / np.where(sw > 0, sw, np.inf)[:, None]).T
    phi = orient(phi, w)
    pve = float(lam[:k].sum() / total) if total > 0 else 0.0
    return UnivariateEigenSystem(surface.feature, surface.d, surface.grid, lam[:k].copy(), phi, pve, total, clipped)


def psd_part(surface: CovarianceSurface, pve: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Spectral truncation of a covariance surface.

    Keeps the leading positive eigencomponents reaching ``pve`` of the
    positive mass (all of them for ``pve=1``).

    Returns
    -------
    values : ndarray
        The truncated surface on the grid.
    basis : ndarray
        ``J x G`` retained eigenfunctions, orthonormal in ``L2``.
    """
    w = surface.grid.weights
    sw = np.sqrt(w)
    C = 0.5 * (surface.values + surface.values.T)
    lam, U = np.linalg.eigh(sw[:, None] * C * sw[None, :])
    lam, U = lam[::-1], U[:, ::-1]
    J = _select(lam, float(pve)) if pve < 1 else int(np.sum(lam > 0))
    lam, U = lam[:J], U[:, :J]
    M = (U * lam) @ U.T
    with np.errstate(divide="ignore"):
        inv = np.where(sw > 0, 1.0 / sw, 0.0)
    return M * inv[:, None] * inv[None, :], (U * inv[:, None]).T


def _curve_matrix(curves, feature: int) -> np.ndarray:
    if isinstance(curves, DenseCurves):
        return curves.values[feature], curves.grids[feature]
    return np.atleast_2d(np.asarray(curves, dtype=float)), None


def scores_by_integration(curves, eig: UnivariateEigenSystem) -> UnivariateScores:
    """Project dense curves on the eigenfunctions: ``xi_ik = int x_i phi_k``.

    ``curves`` is a :class:`DenseCurves` (the feature ``eig.feature`` is
    used) or an ``N x len(grid)`` array already on ``eig.grid``.
    """
    X, grid = _curve_matrix(curves, eig.feature)
    if grid is not None and grid != eig.grid:
        raise InvalidArgumentError("curves and eigenfunctions live on different grids")
    if X.shape[1] != len(eig.grid):
        raise InvalidArgumentError("curves and eigenfunctions live on different grids")
    scores = integrate(eig.grid, X[:, None, :] * eig.eigenfunctions[None, :, :])
    return UnivariateScores(eig.feature, eig.d, np.atleast_2d(scores).reshape(X.shape[0], -1))


def interpolation_matrix(grid: Grid, t) -> np.ndarray:
    """Rows of linear-interpolation weights mapping grid values to ``t``."""
    x = grid.points
    t = np.asarray(t, dtype=float)
    j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
    frac = (t - x[j]) / (x[j + 1] - x[j])
    L = np.zeros((t.size, x.size))
    rows = np.arange(t.size)
    L[rows, j] = 1.0 - frac
    L[rows, j + 1] += frac
    return L


def scores_by_blup(
    sample: FunctionalSample,
    feature: int,
    eig_d: UnivariateEigenSystem,
    cross: CrossOrderSurface,
    cov0: CovarianceSurface,
    sigma2: float,
    pve0: float = 1.0,
) -> UnivariateScores:
    """Best linear unbiased prediction of derivative scores from raw observations.

    For subject ``i`` with centred observations ``Y_i`` at ``T_i``::

        xi_ik = eta_k^T Sigma_i^{-1} Y_i
        eta_k[m] = int d^d/ds^d C(s, T_im) phi_k(s) ds
        Sigma_i = C(T_i, T_i) + sigma2 I

    Surfaces are linearly interpolated at the observed times.

    ``Sigma_i`` uses the leading positive eigencomponents of ``cov0``
    reaching ``pve0`` of its positive mass, and the second argument of
    ``cross`` is projected on the same eigenfunctions. Keeping ``eta_k`` in
    the span of the retained components is what keeps the solve stable
    when ``sigma2`` is close to zero; with ``pve0=1`` only negative
    eigencomponents are removed. A numerically singular ``Sigma_i`` gets a
    ridge of ``1e-8 trace / M``; such subjects are listed in
    ``ridge_subjects``.
    """
    grid = eig_d.grid
    if cross.grid != grid or cov0.grid != grid:
        raise InvalidArgumentError("eigenfunctions and surfaces must share a grid")
    if sigma2 < 0:
        raise InvalidArgumentError("noise variance must be >= 0")
    if not 0 < pve0 <= 1:
        raise InvalidArgumentError(f"pve0 must be in (0, 1], got {pve0}")
    C0, basis = psd_part(cov0, pve0)
    w = grid.weights
    # (K x G): rows are int phi_k(s) cross(s, t_g) ds, projected in t on the basis
    kernel = (eig_d.eigenfunctions * w) @ cross.values
    kernel = ((kernel * w) @ basis.T) @ basis
    K = eig_d.n_components
    out = np.zeros((sample.n_subjects, K))
    ridged = []
    cache: dict[bytes, tuple[np.ndarray, bool]] = {}
    for i in range(sample.n_subjects):
        t = sample.times[i][feature]
        y = sample.values[i][feature]
        if t.size == 0 or K == 0:
            continue
        key = t.tobytes()
        if key not in cache:
            L = interpolation_matrix(grid, t)
            Sigma = L @ C0 @ L.T + sigma2 * np.eye(t.size)
            Sigma = 0.5 * (Sigma + Sigma.T)
            eta = kernel @ L.T
            ev = np.linalg.eigvalsh(Sigma)
            ridge = ev.min() <= 1e-10 * max(ev.max(), 1e-300)
            if ridge:
                Sigma = Sigma + 1e-8 * np.trace(Sigma) / t.size * np.eye(t.size)
            # projector P_i such that xi_i = P_i y_i
            cache[key] = (np.linalg.solve(Sigma, eta.T).T, ridge)
        proj, ridge = cache[key]
        out[i] = proj @ y
        if ridge:
            ridged.append(sample.ids[i])
    return UnivariateScores(feature, eig_d.d, out, tuple(ridged))
