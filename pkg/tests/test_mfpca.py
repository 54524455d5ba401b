import numpy as np
import pytest

from conftest import E1, E2, E3, kl_curves
from dmfpca.errors import InvalidArgumentError, UndefinedMetricError
from dmfpca.fdata import DenseCurves, make_uniform_grid
from dmfpca.metrics import rmise
from dmfpca.mfpca import (
    MultivariateEigenSystem,
    MultivariateScores,
    combine,
    dense_mfpca,
    orient_multivariate,
    pve,
    reconstruct,
    scores_by_integration,
)
from dmfpca.simulation import SimSetting, generate
from dmfpca.ufpca import UnivariateEigenSystem, UnivariateScores


def _usys(feature, grid, funcs, lambdas=None):
    phi = np.stack([f(grid.points) for f in funcs])
    lam = np.ones(len(funcs)) if lambdas is None else np.asarray(lambdas, dtype=float)
    return UnivariateEigenSystem(feature, 0, grid, lam, phi, 1.0, float(lam.sum()))


def _pair(feature, grid, funcs, scores):
    return _usys(feature, grid, funcs), UnivariateScores(feature, 0, np.asarray(scores, dtype=float))


def _random_pairs(rng, grid, n=40, sizes=(2, 3, 1)):
    funcs = [E1, E2, E3]
    return [
        _pair(p, grid, funcs[:k], rng.standard_normal((n, k)) * np.arange(k, 0, -1))
        for p, k in enumerate(sizes)
    ]


def test_combine_orthogonal_score_oracle(grid51):
    u = np.array([2.0, 2.0, -2.0, -2.0, 0.0])  # variance 4 with divisor N - 1
    v = np.array([1.0, -1.0, 1.0, -1.0, 0.0])  # variance 1, orthogonal to u
    eig, sc = combine([_pair(0, grid51, [E1], v[:, None]), _pair(1, grid51, [E2], u[:, None])], 2)
    np.testing.assert_allclose(eig.eigenvalues, [4.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(np.abs(eig.combination_matrix), [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)
    # first component lives on feature 2 only
    np.testing.assert_allclose(eig.eigenfunctions[0][0], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(eig.eigenfunctions[1][0]), np.abs(E2(grid51.points)), atol=1e-12)
    np.testing.assert_allclose(np.abs(eig.eigenfunctions[0][1]), np.abs(E1(grid51.points)), atol=1e-12)
    np.testing.assert_allclose(np.abs(sc.scores), np.abs(np.c_[u, v]), atol=1e-12)


def test_single_feature_reduces_to_univariate(grid51, rng):
    _, x = kl_curves(200, grid51, [E1, E2, E3], [2.0, 1.0, 0.5], rng)
    curves = DenseCurves([grid51], [x])
    from dmfpca.covariance import empirical_covariance
    from dmfpca.ufpca import eigendecompose

    uni = eigendecompose(empirical_covariance(x, grid51), 3)
    eig, _, _ = dense_mfpca(curves, 3, n_components=3)
    np.testing.assert_allclose(eig.eigenvalues, uni.eigenvalues, rtol=1e-10)
    for k in range(3):
        f, g = eig.eigenfunctions[0][k], uni.eigenfunctions[k]
        assert min(np.abs(f - g).max(), np.abs(f + g).max()) < 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_orthonormal(grid51, seed):
    rng = np.random.default_rng(seed)
    eig, _ = combine(_random_pairs(rng, grid51), 4)
    np.testing.assert_allclose(eig.gram(), np.eye(4), atol=1e-6)


def test_orthonormal_benchmark_truth():
    _, truth = generate(SimSetting.named("dense-clean"), 0)
    np.testing.assert_allclose(truth.eigen.gram(), np.eye(truth.eigen.K), atol=1e-6)


def test_score_covariance_diagonal():
    rng = np.random.default_rng(8)
    grid = make_uniform_grid((0, 1), 41)
    pairs = _random_pairs(rng, grid, n=1000)
    eig, sc = combine(pairs, 5)
    S = sc.scores.T @ sc.scores / 999
    off = S - np.diag(np.diag(S))
    assert np.abs(off).max() < 0.05 * eig.eigenvalues[0]
    np.testing.assert_allclose(np.diag(S), eig.eigenvalues, rtol=0.1)


def test_feature_permutation_invariance(grid51, rng):
    pairs = _random_pairs(rng, grid51)
    perm = [2, 0, 1]
    a, sa = combine(pairs, 4)
    b, sb = combine([pairs[p] for p in perm], 4)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-10)
    for k in range(4):
        sign = 1.0 if np.dot(sa.scores[:, k], sb.scores[:, k]) > 0 else -1.0
        for new, old in enumerate(perm):
            np.testing.assert_allclose(sign * b.eigenfunctions[new][k], a.eigenfunctions[old][k], atol=1e-8)


def test_sign_convention(grid51, rng):
    eig, _ = combine(_random_pairs(rng, grid51), 4)
    mass = eig.eigenfunctions[0] @ grid51.weights
    assert np.all(mass[np.abs(mass) > 1e-10] > 0)


def test_sign_convention_falls_through_features(grid51):
    zero = np.zeros((1, 51))
    funcs, = orient_multivariate((zero, -np.ones((1, 51))), (grid51, grid51))[:1]
    assert funcs[1][0, 0] > 0


def test_k_exceeds_available(grid51, rng):
    with pytest.raises(InvalidArgumentError, match="sum of K_p"):
        combine(_random_pairs(rng, grid51), 7)
    with pytest.raises(InvalidArgumentError):
        combine(_random_pairs(rng, grid51), 0)


def test_combine_input_errors(grid51, rng):
    with pytest.raises(InvalidArgumentError):
        combine([], 1)
    with pytest.raises(InvalidArgumentError):
        combine([_pair(0, grid51, [E1], [[1.0]])], 1)
    with pytest.raises(InvalidArgumentError):
        combine([_pair(0, grid51, [E1], np.ones((3, 1))), _pair(1, grid51, [E1], np.ones((4, 1)))], 1)


def test_reconstruct_zero_scores(grid51, rng):
    eig, sc = combine(_random_pairs(rng, grid51), 3)
    out = reconstruct(eig, MultivariateScores(0, np.zeros_like(sc.scores)))
    assert all(np.all(v == 0) for v in out.values)


def test_reconstruct_in_span(grid51, rng):
    eig, _ = combine(_random_pairs(rng, grid51), 4)
    rho = rng.standard_normal((10, 4))
    data = DenseCurves(eig.grids, [rho @ f for f in eig.eigenfunctions])
    back = reconstruct(eig, scores_by_integration(data, eig))
    assert rmise(data, back) < 1e-6


def test_reconstruct_too_many_components(grid51, rng):
    eig, sc = combine(_random_pairs(rng, grid51), 2)
    with pytest.raises(InvalidArgumentError):
        reconstruct(eig, sc, 3)


def test_reconstruction_error_monotone_in_k():
    _, truth = generate(SimSetting.named("dense-clean"), 0)
    eig, sc, mean = dense_mfpca(truth.derivatives, 3, n_components=0.9999, center=True, d=1)
    centered = DenseCurves(truth.derivatives.grids, [v - m for v, m in zip(truth.derivatives.values, mean.values)])
    errs = [rmise(centered, reconstruct(eig, sc, k)) for k in (1, 2, 3)]
    assert errs[0] >= errs[1] >= errs[2]


@pytest.mark.parametrize("nu, expected", [((3.0, 1.0), (0.75, 1.0)), ((2.0,), (1.0,)), ((1.0, 1.0, 2.0), (0.25, 0.5, 1.0))])
def test_pve(grid51, nu, expected):
    k = len(nu)
    eig = MultivariateEigenSystem(0, np.array(nu), (np.zeros((k, 51)),), (grid51,))
    np.testing.assert_allclose(pve(eig), expected)


def test_pve_zero_spectrum(grid51):
    eig = MultivariateEigenSystem(0, np.zeros(2), (np.zeros((2, 51)),), (grid51,))
    with pytest.raises(UndefinedMetricError):
        pve(eig)


def test_pve_uses_total_trace(grid51, rng):
    eig, _ = combine(_random_pairs(rng, grid51), 2)
    assert pve(eig)[-1] < 1.0
    full, _ = combine(_random_pairs(np.random.default_rng(0), grid51), 6)
    assert pve(full)[-1] == pytest.approx(1.0)


def test_truncated(grid51, rng):
    eig, _ = combine(_random_pairs(rng, grid51), 4)
    t = eig.truncated(2)
    assert t.K == 2 and t.total_variance == eig.total_variance
    with pytest.raises(InvalidArgumentError):
        eig.truncated(5)
