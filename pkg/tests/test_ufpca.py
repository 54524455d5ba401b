import numpy as np
import pytest

from conftest import E1, E2, E3, dense_sample, kl_curves
from dmfpca.covariance import CovarianceSurface, CrossOrderSurface, empirical_covariance
from dmfpca.errors import InvalidArgumentError
from dmfpca.fdata import FunctionalSample, Grid, make_uniform_grid
from dmfpca.ufpca import eigendecompose, interpolation_matrix, orient, psd_part, scores_by_blup, scores_by_integration


def _trapezoid_grid(points):
    points = np.asarray(points, dtype=float)
    h = np.diff(points)
    w = np.zeros_like(points)
    w[:-1] += h / 2
    w[1:] += h / 2
    return Grid(points, w)


def _kl_surface(grid, funcs, variances):
    F = np.stack([f(grid.points) for f in funcs])
    return F.T @ np.diag(variances) @ F


def test_rank_one_surface(grid51):
    f = E1(grid51.points)
    eig = eigendecompose(CovarianceSurface(0, grid51, np.outer(f, f)), n_components=2)
    assert abs(eig.eigenvalues[0] - 1.0) < 1e-6
    assert eig.n_components == 1 or abs(eig.eigenvalues[1]) < 1e-10
    np.testing.assert_allclose(eig.eigenfunctions[0], f, atol=1e-8)


def test_five_point_oracle():
    rng = np.random.default_rng(3)
    grid = _trapezoid_grid([0.0, 0.1, 0.35, 0.6, 1.0])
    A = rng.standard_normal((5, 5))
    C = A @ A.T
    eig = eigendecompose(CovarianceSurface(0, grid, C), n_components=5)
    # C W is similar to the symmetric form; its spectrum is the oracle
    ref = np.sort(np.linalg.eigvals(C @ np.diag(grid.weights)).real)[::-1]
    np.testing.assert_allclose(eig.eigenvalues, ref, atol=1e-10)
    # each eigenfunction satisfies the discretised integral equation
    for lam, phi in zip(eig.eigenvalues, eig.eigenfunctions):
        np.testing.assert_allclose(C @ (grid.weights * phi), lam * phi, atol=1e-10)


def test_diagonal_surface_on_five_points():
    grid = _trapezoid_grid([0.0, 0.2, 0.5, 0.7, 1.0])
    c = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    eig = eigendecompose(CovarianceSurface(0, grid, np.diag(c)), n_components=5)
    np.testing.assert_allclose(eig.eigenvalues, np.sort(c * grid.weights)[::-1], atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_trace_bound(grid51, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((51, 8))
    C = A @ A.T - 0.5 * np.eye(51)  # indefinite on purpose
    surf = CovarianceSurface(0, grid51, C)
    eig = eigendecompose(surf, n_components=0.9)
    assert eig.eigenvalues.sum() <= grid51.weights @ np.diag(C) + eig.clipped_mass + 1e-6
    assert eig.total_variance <= grid51.weights @ np.diag(C) + eig.clipped_mass + 1e-6
    assert np.all(eig.eigenvalues > 0)


def test_negative_part_clipped(grid51):
    f, g = E1(grid51.points), E2(grid51.points)
    eig = eigendecompose(CovarianceSurface(0, grid51, np.outer(f, f) - 0.5 * np.outer(g, g)), n_components=1.0)
    assert eig.n_components == 1
    assert eig.clipped_mass == pytest.approx(0.5, abs=1e-8)
    assert eig.pve == pytest.approx(1.0)


def test_nonsymmetric_rejected(grid51):
    C = np.outer(E1(grid51.points), E2(grid51.points))
    surf = CovarianceSurface.__new__(CovarianceSurface)
    object.__setattr__(surf, "feature", 0)
    object.__setattr__(surf, "grid", grid51)
    object.__setattr__(surf, "values", C)
    object.__setattr__(surf, "d", 0)
    with pytest.raises(InvalidArgumentError):
        eigendecompose(surf)


def test_deterministic(grid51, rng):
    _, x = kl_curves(30, grid51, [E1, E2, E3], [2, 1, 0.5], rng)
    surf = empirical_covariance(x, grid51)
    a, b = eigendecompose(surf, 3), eigendecompose(surf, 3)
    assert np.array_equal(a.eigenvalues, b.eigenvalues)
    assert np.array_equal(a.eigenfunctions, b.eigenfunctions)


def test_sign_convention(grid51):
    C = _kl_surface(grid51, [E1, E2, E3], [3.0, 2.0, 1.0])
    eig = eigendecompose(CovarianceSurface(0, grid51, C), 3)
    mass = eig.eigenfunctions @ grid51.weights
    for k in range(3):
        if abs(mass[k]) > 1e-10:
            assert mass[k] > 0
        else:
            first = eig.eigenfunctions[k][np.abs(eig.eigenfunctions[k]) > 1e-12][0]
            assert first > 0


def test_orient_zero_mass_uses_first_value():
    w = np.full(4, 0.25)
    phi = orient(np.array([[-1.0, 1.0, -1.0, 1.0]]), w)
    assert phi[0, 0] > 0


@pytest.mark.parametrize("selector, expected", [(1, 1), (2, 2), (0.5, 1), (0.8, 2), (0.99, 3), (1.0, 3)])
def test_selector(grid51, selector, expected):
    C = _kl_surface(grid51, [E1, E2, E3], [6.0, 3.0, 1.0])
    assert eigendecompose(CovarianceSurface(0, grid51, C), selector).n_components == expected


def test_fixed_count_capped_at_positive_part():
    grid = _trapezoid_grid([0.0, 0.2, 0.5, 0.7, 1.0])
    eig = eigendecompose(CovarianceSurface(0, grid, np.diag([1.0, 2.0, -1.0, 0.0, 3.0])), 10)
    assert eig.n_components == 3


@pytest.mark.parametrize("selector", [0, -1, 0.0, 1.5])
def test_selector_invalid(grid51, selector):
    C = _kl_surface(grid51, [E1], [1.0])
    with pytest.raises(InvalidArgumentError):
        eigendecompose(CovarianceSurface(0, grid51, C), selector)


def test_psd_part_reconstructs(grid51):
    f, g = E1(grid51.points), E2(grid51.points)
    C = 2 * np.outer(f, f) - np.outer(g, g)
    M, basis = psd_part(CovarianceSurface(0, grid51, C))
    np.testing.assert_allclose(M, 2 * np.outer(f, f), atol=1e-8)
    np.testing.assert_allclose((basis * grid51.weights) @ basis.T, np.eye(basis.shape[0]), atol=1e-10)


@pytest.fixture
def eig3(grid51):
    C = _kl_surface(grid51, [E1, E2, E3], [3.0, 2.0, 1.0])
    return eigendecompose(CovarianceSurface(0, grid51, C), 3)


def test_integration_unit_curve(eig3):
    sc = scores_by_integration(eig3.eigenfunctions[:1], eig3)
    np.testing.assert_allclose(sc.scores, [[1.0, 0.0, 0.0]], atol=1e-8)


def test_integration_combination(eig3):
    x = 2 * eig3.eigenfunctions[0] - 3 * eig3.eigenfunctions[1]
    np.testing.assert_allclose(scores_by_integration(x[None], eig3).scores, [[2.0, -3.0, 0.0]], atol=1e-8)


def test_integration_zero(eig3):
    assert np.all(scores_by_integration(np.zeros((4, 51)), eig3).scores == 0)


def test_integration_grid_mismatch(eig3):
    with pytest.raises(InvalidArgumentError):
        scores_by_integration(np.zeros((2, 40)), eig3)


def test_interpolation_matrix_exact_on_grid(grid51):
    L = interpolation_matrix(grid51, grid51.points[[0, 7, 50]])
    np.testing.assert_allclose(L @ grid51.points, grid51.points[[0, 7, 50]])
    L = interpolation_matrix(grid51, [0.013])
    assert L @ grid51.points == pytest.approx(0.013)


def test_blup_equals_integration_dense_noiseless(grid51, rng):
    C = _kl_surface(grid51, [E1, E2, E3], [3.0, 2.0, 1.0])
    eig = eigendecompose(CovarianceSurface(0, grid51, C), 3)
    _, x = kl_curves(20, grid51, [E1, E2, E3], np.sqrt([3.0, 2.0, 1.0]), rng)
    sample = dense_sample([x], grid51)
    blup = scores_by_blup(sample, 0, eig, CrossOrderSurface(0, grid51, C), CovarianceSurface(0, grid51, C), 0.0)
    np.testing.assert_allclose(blup.scores, scores_by_integration(x, eig).scores, atol=1e-3)


def test_blup_zero_data(grid51, eig3):
    C = _kl_surface(grid51, [E1, E2, E3], [3.0, 2.0, 1.0])
    sample = dense_sample([np.zeros((3, 51))], grid51)
    sc = scores_by_blup(sample, 0, eig3, CrossOrderSurface(0, grid51, C), CovarianceSurface(0, grid51, C), 0.1)
    assert np.all(sc.scores == 0)


def _rank_one_sparse(grid, rng, n=10):
    f = E1(grid.points)
    times, values = [], []
    z = rng.standard_normal(n)
    for i in range(n):
        idx = np.sort(rng.choice(grid.points.size, size=5, replace=False))
        times.append([grid.points[idx]])
        values.append([z[i] * f[idx] + 0.3 * rng.standard_normal(5)])
    return FunctionalSample([str(i) for i in range(n)], [(0.0, 1.0)], times, values), f


def test_blup_rank_one_closed_form(grid51, rng):
    sample, f = _rank_one_sparse(grid51, rng)
    C = np.outer(f, f)
    eig = eigendecompose(CovarianceSurface(0, grid51, C), 1)
    for s2 in (0.01, 0.5, 4.0):
        sc = scores_by_blup(sample, 0, eig, CrossOrderSurface(0, grid51, C), CovarianceSurface(0, grid51, C), s2)
        for i in range(sample.n_subjects):
            fi = E1(sample.times[i][0])
            ref = fi @ sample.values[i][0] / (fi @ fi + s2)
            assert sc.scores[i, 0] == pytest.approx(ref, abs=1e-8)


def test_blup_shrinks_monotonically(grid51, rng):
    sample, f = _rank_one_sparse(grid51, rng)
    C = np.outer(f, f)
    eig = eigendecompose(CovarianceSurface(0, grid51, C), 1)
    mags = [
        np.abs(scores_by_blup(sample, 0, eig, CrossOrderSurface(0, grid51, C), CovarianceSurface(0, grid51, C), s2)
               .scores[:, 0])
        for s2 in (0.0, 0.1, 1.0, 10.0, 1e4)
    ]
    for a, b in zip(mags, mags[1:]):
        assert np.all(b <= a + 1e-12)
    assert np.all(mags[-1] < 1e-2 * mags[0] + 1e-12)


def test_blup_ridge_flagged(grid51):
    f = E1(grid51.points)
    C = np.outer(f, f)
    eig = eigendecompose(CovarianceSurface(0, grid51, C), 1)
    sample = dense_sample([np.outer([1.0, -2.0], f)], grid51)
    sc = scores_by_blup(sample, 0, eig, CrossOrderSurface(0, grid51, C), CovarianceSurface(0, grid51, C), 0.0)
    assert sc.ridge_subjects == ("0", "1")
    np.testing.assert_allclose(sc.scores[:, 0], [1.0, -2.0], atol=1e-4)


def test_blup_invalid(grid51, eig3):
    C = _kl_surface(grid51, [E1, E2, E3], [3.0, 2.0, 1.0])
    sample = dense_sample([np.zeros((2, 51))], grid51)
    args = (sample, 0, eig3, CrossOrderSurface(0, grid51, C), CovarianceSurface(0, grid51, C))
    with pytest.raises(InvalidArgumentError):
        scores_by_blup(*args, -0.1)
    with pytest.raises(InvalidArgumentError):
        scores_by_blup(*args, 0.1, pve0=0.0)
    other = make_uniform_grid((0, 1), 21)
    with pytest.raises(InvalidArgumentError):
        scores_by_blup(sample, 0, eig3, CrossOrderSurface(0, other, np.zeros((21, 21))),
                       CovarianceSurface(0, grid51, C), 0.1)


def test_score_variances_match_eigenvalues():
    rng = np.random.default_rng(21)
    grid = make_uniform_grid((0, 1), 101)
    _, x = kl_curves(1000, grid, [E1, E2, E3], [2.0, 1.0, 0.5], rng)
    eig = eigendecompose(empirical_covariance(x, grid, center=True), 3)
    var = scores_by_integration(x, eig).scores.var(axis=0, ddof=1)
    np.testing.assert_allclose(var, [4.0, 1.0, 0.25], rtol=0.1)
