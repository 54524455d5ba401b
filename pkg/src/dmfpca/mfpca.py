"""Multivariate FPCA assembled from univariate expansions.

Univariate scores of all features are stacked into ``Xi`` (``N x sum K_p``)
and the eigenvectors ``c_k`` of ``Z = Xi^T Xi / (N - 1)`` give the
multivariate eigenvalues, eigenfunctions ``psi_k^(p) = sum_m c_km^(p)
phi_m^(p)`` and scores ``rho_ik = Xi_i . c_k``. Features are combined with
unit weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from dmfpca.errors import InvalidArgumentError, UndefinedMetricError
from dmfpca.fdata import DenseCurves
from dmfpca.covariance import empirical_covariance
from dmfpca.ufpca import eigendecompose, scores_by_integration as univariate_integration


@dataclass(frozen=True, eq=False)
class MultivariateEigenSystem:
    """``K`` multivariate eigenpairs.

    ``eigenfunctions[p]`` is a ``K x len(grids[p])`` matrix.
    ``total_variance`` is the trace of ``Z``, the denominator of :func:`pve`.
    """

    d: int
    eigenvalues: np.ndarray
    eigenfunctions: tuple
    grids: tuple
    combination_matrix: np.ndarray | None = None
    total_variance: float | None = None

    @property
    def K(self) -> int:
        return self.eigenvalues.size

    @property
    def n_features(self) -> int:
        return len(self.grids)

    def gram(self) -> np.ndarray:
        """Matrix of multivariate inner products between eigenfunctions."""
        return sum((f * g.weights) @ f.T for f, g in zip(self.eigenfunctions, self.grids))

    def truncated(self, K: int) -> "MultivariateEigenSystem":
        if not 1 <= K <= self.K:
            raise InvalidArgumentError(f"cannot truncate {self.K} components to {K}")
        cm = None if self.combination_matrix is None else self.combination_matrix[:, :K]
        return MultivariateEigenSystem(
            self.d, self.eigenvalues[:K], tuple(f[:K] for f in self.eigenfunctions), self.grids, cm,
            self.total_variance,
        )


@dataclass(frozen=True, eq=False)
class MultivariateScores:
    d: int
    scores: np.ndarray

    @property
    def K(self) -> int:
        return self.scores.shape[1]


def orient_multivariate(eigenfunctions, grids, *others):
    """Sign convention: feature 1 of each eigenfunction has nonnegative integral.

    When that integral vanishes (below 1e-10) the next feature decides, and
    failing all features, the first nonzero grid value. Arrays in ``others``
    whose last axis indexes components get the same flips.
    """
    K = eigenfunctions[0].shape[0]
    signs = np.ones(K)
    for k in range(K):
        for f, g in zip(eigenfunctions, grids):
            mass = f[k] @ g.weights
            if abs(mass) > 1e-10:
                signs[k] = -1.0 if mass < 0 else 1.0
                break
        else:
            flat = np.concatenate([f[k] for f in eigenfunctions])
            nz = np.flatnonzero(np.abs(flat) > 1e-12)
            if nz.size and flat[nz[0]] < 0:
                signs[k] = -1.0
    funcs = tuple(f * signs[:, None] for f in eigenfunctions)
    return (funcs, *(o * signs for o in others))


def combine(univariate, K: int) -> tuple[MultivariateEigenSystem, MultivariateScores]:
    """Combine per-feature eigensystems and scores into ``K`` multivariate components.

    Parameters
    ----------
    univariate : sequence of (UnivariateEigenSystem, UnivariateScores)
        One entry per feature, in feature order.
    K : int
        Number of multivariate components.
    """
    univariate = list(univariate)
    if not univariate:
        raise InvalidArgumentError("no features to combine")
    eigs = [e for e, _ in univariate]
    blocks = [np.asarray(s.scores, dtype=float) for _, s in univariate]
    n = {b.shape[0] for b in blocks}
    if len(n) != 1:
        raise InvalidArgumentError("score matrices disagree on the number of subjects")
    N = n.pop()
    if N < 2:
        raise InvalidArgumentError("at least two subjects are needed")
    sizes = [e.n_components for e in eigs]
    total = sum(sizes)
    if not 1 <= K <= total:
        raise InvalidArgumentError(
            f"K={K} exceeds the {total} univariate components available (sum of K_p = {total})"
        )
    d = eigs[0].d
    Xi = np.hstack(blocks)
    Z = Xi.T @ Xi / (N - 1)
    nu, c = np.linalg.eigh(0.5 * (Z + Z.T))
    nu, c = nu[::-1][:K], c[:, ::-1][:, :K]
    nu = np.clip(nu, 0.0, None)
    offsets = np.cumsum([0] + sizes)
    funcs = tuple(
        c[offsets[p]:offsets[p + 1]].T @ e.eigenfunctions if sizes[p] else np.zeros((K, len(e.grid)))
        for p, e in enumerate(eigs)
    )
    grids = tuple(e.grid for e in eigs)
    rho = Xi @ c
    funcs, c, rho = orient_multivariate(funcs, grids, c, rho)
    system = MultivariateEigenSystem(d, nu, funcs, grids, c, float(np.trace(Z)))
    return system, MultivariateScores(d, rho)


def reconstruct(eig: MultivariateEigenSystem, scores: MultivariateScores, K_use: int | None = None) -> DenseCurves:
    """Truncated expansion ``sum_{k <= K_use} rho_ik psi_k`` on each feature grid.

    The mean is not included.
    """
    K_use = eig.K if K_use is None else K_use
    if not 0 <= K_use <= eig.K or K_use > scores.K:
        raise InvalidArgumentError(f"K_use={K_use} exceeds the {eig.K} available components")
    rho = scores.scores[:, :K_use]
    return DenseCurves(eig.grids, [rho @ f[:K_use] for f in eig.eigenfunctions])


def pve(eig: MultivariateEigenSystem) -> np.ndarray:
    """Cumulative proportion of variance explained by the first ``k`` components."""
    nu = np.asarray(eig.eigenvalues, dtype=float)
    total = eig.total_variance if eig.total_variance is not None else nu.sum()
    if not total > 0 or not np.any(nu > 0):
        raise UndefinedMetricError("proportion of variance is undefined for a zero spectrum")
    return np.cumsum(nu) / total


def scores_by_integration(curves: DenseCurves, eig: MultivariateEigenSystem) -> MultivariateScores:
    """Multivariate projections ``rho_ik = sum_p int x_i^(p) psi_k^(p)``."""
    if curves.n_features != eig.n_features or any(a != b for a, b in zip(curves.grids, eig.grids)):
        raise InvalidArgumentError("curves and eigenfunctions live on different grids")
    rho = sum((v * g.weights) @ f.T for v, f, g in zip(curves.values, eig.eigenfunctions, eig.grids))
    return MultivariateScores(eig.d, rho)


def dense_mfpca(curves: DenseCurves, K: int, n_components=0.99, center: bool = False, d: int = 0):
    """MFPCA of fully observed curves.

    Each feature's covariance is the empirical ``X^T X / (N - 1)`` on its
    grid (after subtracting the cross-sectional mean when ``center``), and
    univariate scores come from numerical integration.

    Returns
    -------
    eigen : MultivariateEigenSystem
    scores : MultivariateScores
    mean : DenseCurves
        The subtracted mean (zeros when ``center`` is false), one row.
    """
    pairs, means = [], []
    for p, (g, X) in enumerate(zip(curves.grids, curves.values)):
        mu = X.mean(axis=0) if center else np.zeros(X.shape[1])
        Xc = X - mu
        eig = eigendecompose(replace(empirical_covariance(Xc, g, p), d=d), n_components)
        pairs.append((eig, univariate_integration(Xc, eig)))
        means.append(mu[None, :])
    eigen, scores = combine(pairs, K)
    return eigen, scores, DenseCurves(curves.grids, means)
