import numpy as np
import pytest

from dmfpca.errors import InvalidArgumentError
from dmfpca.mfpca import pve
from dmfpca.simulation import (
    PARAM_COV,
    PARAM_MEAN,
    SETTINGS,
    SimParams,
    SimSetting,
    draw_params,
    eval_derivatives,
    eval_functions,
    generate,
)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_hand_values():
    assert eval_functions(SimParams(0.0, 0.5, 3.75), 0.0)[0] == pytest.approx(1.0)
    assert eval_functions(SimParams(0.0, 0.0, 0.0), 0.0)[3] == pytest.approx(2.0)
    assert eval_derivatives(SimParams(0.0, 0.0, 0.0), 0.0)[3] == pytest.approx(4.0)


@pytest.mark.parametrize("b, t", [(0.2, 0.8), (0.5, 0.5), (0.0, 1.0)])
def test_sine_zeros(b, t):
    # sin^3 vanishes when b + t is an integer
    assert eval_functions(SimParams(1.3, b, 2.0), t)[1] == pytest.approx(1.3, abs=1e-12)


def test_derivative_cosine_zero():
    assert eval_derivatives(SimParams(0.4, 0.25, 3.0), 0.25)[1] == pytest.approx(0.0, abs=1e-12)


def test_finite_difference_oracle():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        p = draw_params(1, 0, int(rng.integers(1 << 30)))
        t = rng.uniform(h, 1 - h)
        fd = (eval_functions(p, t + h) - eval_functions(p, t - h)) / (2 * h)
        assert np.max(np.abs(fd - eval_derivatives(p, t))) < 1e-4


def test_vectorised_shapes():
    t = np.linspace(0, 1, 7)
    assert eval_functions(SimParams(0, 0.5, 3.75), t).shape == (4, 7)
    assert eval_derivatives(SimParams(0, 0.5, 3.75), t).shape == (4, 7)


def test_covariance_positive_definite():
    np.linalg.cholesky(PARAM_COV)
    np.testing.assert_allclose(PARAM_COV, PARAM_COV.T)


def test_parameter_moments():
    n = 100_000
    draws = np.array([[q.a, q.b, q.c] for q in (draw_params(7, 0, i) for i in range(n))])
    se_mean = np.sqrt(np.diag(PARAM_COV) / n)
    assert np.all(np.abs(draws.mean(axis=0) - PARAM_MEAN) < 3 * se_mean)
    S = np.cov(draws, rowvar=False)
    # standard error of a Gaussian sample covariance entry
    se_cov = np.sqrt((PARAM_COV**2 + np.outer(np.diag(PARAM_COV), np.diag(PARAM_COV))) / (n - 1))
    assert np.all(np.abs(S - PARAM_COV) < 3 * se_cov)


def test_deterministic():
    a, _ = generate(SimSetting.named("sparse-medium"), 3)
    b, _ = generate(SimSetting.named("sparse-medium"), 3)
    for i in range(a.n_subjects):
        for p in range(4):
            assert np.array_equal(a.times[i][p], b.times[i][p])
            assert np.array_equal(a.values[i][p], b.values[i][p])


def test_replications_and_seeds_differ():
    a, _ = generate(SimSetting.named("dense-noisy"), 0)
    b, _ = generate(SimSetting.named("dense-noisy"), 1)
    c, _ = generate(SimSetting.named("dense-noisy", seed=1), 0)
    assert not np.array_equal(a.values[0][0], b.values[0][0])
    assert not np.array_equal(a.values[0][0], c.values[0][0])


def test_dense_clean_full_grid():
    sample, truth = generate(SimSetting.named("dense-clean"), 0)
    assert sample.n_subjects == 100
    for p in range(4):
        assert np.all(sample.n_obs(p) == 101)
        np.testing.assert_array_equal(np.vstack([v[p] for v in sample.values]), truth.functions.values[p])


def test_sparse_high_counts_and_moment():
    sample, truth = generate(SimSetting.named("sparse-high", n_subjects=10_000), 0)
    for p in range(4):
        m = sample.n_obs(p)
        assert m.min() >= 10 and m.max() <= 20
        assert set(np.unique(m)) == set(range(10, 21))
    a = np.array([q.a for q in truth.params])
    assert abs(a.mean()) < 0.03


def test_sparse_medium_counts_and_grid_points():
    sample, truth = generate(SimSetting.named("sparse-medium"), 2)
    grid = truth.derivatives.grids[0].points
    for i in range(sample.n_subjects):
        for p in range(4):
            t = sample.times[i][p]
            assert 50 <= t.size <= 60
            assert np.all(np.diff(t) > 0) and np.all(np.isin(t, grid))


def test_noise_stream_independence():
    clean, _ = generate(SimSetting.named("sparse-high", sigma=0.0), 4)
    noisy, _ = generate(SimSetting.named("sparse-high"), 4)
    differs = False
    for i in range(clean.n_subjects):
        for p in range(4):
            assert np.array_equal(clean.times[i][p], noisy.times[i][p])
            differs |= not np.array_equal(clean.values[i][p], noisy.values[i][p])
    assert differs


def test_noise_level():
    clean, _ = generate(SimSetting.named("dense-clean"), 0)
    noisy, _ = generate(SimSetting.named("dense-noisy"), 0)
    resid = np.concatenate([noisy.values[i][p] - clean.values[i][p] for i in range(100) for p in range(4)])
    assert resid.std() == pytest.approx(0.5, rel=0.03)


def test_truth_pve_over_replications():
    # single replications of 100 subjects scatter around the target
    v = [pve(generate(SimSetting.named("dense-clean"), r)[1].eigen)[2] for r in range(10)]
    assert 0.90 <= np.mean(v) <= 0.96


def test_truth_pve_large_sample():
    _, truth = generate(SimSetting.named("dense-clean", n_subjects=2000), 0)
    assert pve(truth.eigen)[2] == pytest.approx(0.93, abs=0.03)


def test_truth_scores_reconstruct_centered_derivatives():
    _, truth = generate(SimSetting.named("dense-clean"), 0)
    np.testing.assert_allclose(truth.mean_derivative.values[0][0], truth.derivatives.values[0].mean(axis=0))
    assert truth.eigen.K == truth.scores.K == 3
    np.testing.assert_allclose(truth.eigen.gram(), np.eye(3), atol=1e-8)


def test_setting_table():
    assert SETTINGS["dense-clean"] == dict(sigma=0.0, m_range=None)
    assert SimSetting.named("sparse-high").m_range == (10, 20)
    assert SimSetting.named("sparse-medium").sigma == 0.5


@pytest.mark.parametrize("kw", [dict(sigma=-1.0), dict(m_range=(0, 5)), dict(m_range=(30, 20)), dict(m_range=(1, 500))])
def test_setting_validation(kw):
    with pytest.raises(InvalidArgumentError):
        SimSetting.named("sparse-high", **kw)


def test_unknown_setting_and_replication():
    with pytest.raises(InvalidArgumentError):
        SimSetting.named("dense")
    with pytest.raises(InvalidArgumentError):
        generate(SimSetting.named("dense-clean"), -1)
