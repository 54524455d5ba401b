"""End-to-end estimators of the eigencomponents and scores of derivative curves.

``fit_dmfpca``
    Differentiate each feature's smoothed covariance surface, run univariate
    FPCA on it, predict univariate derivative scores from the raw
    observations, then combine features.
``fit_dmkl``
    Run MFPCA on the curves themselves, differentiate the multivariate
    eigenfunctions by finite differences, rebuild derivative curves from the
    expansion and run MFPCA again on those.
``fit_direct``
    Smooth every observed curve with its own P-spline, differentiate it
    analytically and run MFPCA on the derivative curves.

All three subtract a pooled P-spline mean first and add its ``d``-th
derivative back to the reconstructions.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from dmfpca.covariance import CovarianceModel, fit_mean, tabulate_fits
from dmfpca.errors import IllPosedFitError, InvalidArgumentError, StageError
from dmfpca.fdata import DenseCurves, FunctionalSample, center, make_uniform_grid
from dmfpca.mfpca import (
    MultivariateEigenSystem,
    MultivariateScores,
    combine,
    dense_mfpca,
    pve,
    reconstruct,
)
from dmfpca.pspline import SplineConfig, eval_derivative, fit_curve, select_lambda_pooled
from dmfpca.ufpca import eigendecompose, scores_by_blup, scores_by_integration

METHODS = ("dmfpca", "dmkl", "direct")
SCORE_METHODS = ("auto", "integration", "blup")
DENSE_FRACTION = 0.8


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by the three estimators.

    Attributes
    ----------
    d : int
        Derivative order.
    K : int
        Number of multivariate components.
    n_components : int or float
        Univariate truncation: a fixed count or a PVE threshold.
    spline : SplineConfig
        Basis, penalty and smoothing-parameter choice for all smoothers.
    score_method : {'auto', 'integration', 'blup'}
        How univariate scores are obtained in covariance-based steps.
    n_grid : int
        Points of the uniform evaluation grid on each feature domain.
    assume_noise : bool
        Drop the diagonal of the raw covariance and estimate a noise variance.
    """

    d: int = 1
    K: int = 3
    n_components: int | float = 0.99
    spline: SplineConfig = field(default_factory=SplineConfig)
    score_method: str = "auto"
    n_grid: int = 101
    assume_noise: bool = True

    def __post_init__(self):
        if self.d < 0:
            raise InvalidArgumentError("derivative order must be >= 0")
        if self.d > self.spline.degree:
            raise InvalidArgumentError(f"d={self.d} exceeds the spline degree {self.spline.degree}")
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        if self.score_method not in SCORE_METHODS:
            raise InvalidArgumentError(f"score_method must be one of {SCORE_METHODS}")
        if self.n_grid < 2:
            raise InvalidArgumentError("n_grid must be >= 2")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Output of one estimator.

    ``reconstruction`` includes the mean derivative; ``ids`` lists the
    subjects the rows of ``scores`` and ``reconstruction`` refer to.
    """

    method: str
    eigen: MultivariateEigenSystem
    scores: MultivariateScores
    reconstruction: DenseCurves
    mean_derivative: DenseCurves
    ids: tuple
    report: dict


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextmanager
    def __call__(self, name):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def _grids(sample: FunctionalSample, n_grid: int):
    return [make_uniform_grid(dom, n_grid) for dom in sample.domains]


def is_dense(sample: FunctionalSample, n_grid: int) -> bool:
    """Whether every subject observes every feature on at least 80% of ``n_grid`` points."""
    return all(np.all(sample.n_obs(p) >= DENSE_FRACTION * n_grid) for p in range(sample.n_features))


def _interpolate_to_grids(sample: FunctionalSample, grids) -> DenseCurves:
    values = []
    for p, g in enumerate(grids):
        values.append(np.array([
            np.interp(g.points, sample.times[i][p], sample.values[i][p]) for i in range(sample.n_subjects)
        ]))
    return DenseCurves(grids, values)


def _center(sample, cfg, stage):
    with stage("mean"):
        fits = fit_mean(sample, cfg.spline)
        grids = _grids(sample, cfg.n_grid)
        centered = center(sample, tabulate_fits(fits, grids, 0))
        mean_d = tabulate_fits(fits, grids, cfg.d)
    return fits, grids, centered, mean_d


def _covariance_route(centered: FunctionalSample, grids, cfg: FitConfig, d: int, stage, report):
    """Univariate FPCA of ``d^d d^d C`` per feature, scores, and multivariate combination."""
    method = cfg.score_method
    if method == "auto":
        method = "integration" if d == 0 and is_dense(centered, cfg.n_grid) else "blup"
    if method == "integration" and d > 0:
        raise StageError("scores", InvalidArgumentError(
            "integration scores need observed derivative curves; use score_method='blup' for d > 0"
        ))
    dense = _interpolate_to_grids(centered, grids) if method == "integration" else None
    pairs, feats = [], []
    for p, g in enumerate(grids):
        with stage("covariance"):
            model = CovarianceModel(centered, p, cfg.spline, cfg.assume_noise)
            surf = model.covariance(g, d)
        with stage("ufpca"):
            eig = eigendecompose(surf, cfg.n_components)
            if eig.n_components == 0:
                raise InvalidArgumentError(f"feature {p + 1}: derivative covariance has no positive eigenvalue")
        with stage("scores"):
            if method == "integration":
                sc = scores_by_integration(dense, eig)
            else:
                sc = scores_by_blup(centered, p, eig, model.cross_order(g, d), model.covariance(g, 0), model.sigma2)
        pairs.append((eig, sc))
        feats.append({
            "feature": p + 1,
            "lambda": model.lam,
            "sigma2": model.sigma2,
            "n_components": eig.n_components,
            "univariate_pve": eig.pve,
            "clipped_mass": eig.clipped_mass,
            "clipped_fraction": eig.clipped_mass / (eig.clipped_mass + eig.total_variance)
            if eig.total_variance > 0 else 0.0,
            "ridge_subjects": len(sc.ridge_subjects),
        })
    with stage("combine"):
        eigen, scores = combine(pairs, cfg.K)
    report["score_method"] = method
    report.setdefault("features", []).extend(feats)
    return eigen, scores


def _finish(method, eigen, scores, mean_d, ids, report, stage, extra_t=None):
    with stage("reconstruct"):
        recon = reconstruct(eigen, scores) + _broadcast(mean_d, scores.scores.shape[0])
    report["pve"] = pve(eigen).tolist() if np.any(eigen.eigenvalues > 0) else []
    report["eigenvalues"] = eigen.eigenvalues.tolist()
    report["timings"] = dict(stage.timings)
    return FitResult(method, eigen, scores, recon, mean_d, tuple(ids), report)


def _broadcast(curves: DenseCurves, n: int) -> DenseCurves:
    return DenseCurves(curves.grids, [np.repeat(v[:1], n, axis=0) for v in curves.values])


def fit_mfpca(sample: FunctionalSample, cfg: FitConfig | None = None) -> FitResult:
    """MFPCA of the curves themselves (``d = 0``) via univariate covariance surfaces."""
    cfg = replace(cfg or FitConfig(), d=0)
    stage, report = _Stages(), {"method": "mfpca", "d": 0, "K": cfg.K}
    _, grids, centered, mean_d = _center(sample, cfg, stage)
    eigen, scores = _covariance_route(centered, grids, cfg, 0, stage, report)
    return _finish("mfpca", eigen, scores, mean_d, sample.ids, report, stage)


def fit_dmfpca(sample: FunctionalSample, cfg: FitConfig | None = None) -> FitResult:
    """Derivative MFPCA from differentiated univariate covariance surfaces."""
    cfg = cfg or FitConfig()
    stage, report = _Stages(), {"method": "dmfpca", "d": cfg.d, "K": cfg.K}
    _, grids, centered, mean_d = _center(sample, cfg, stage)
    eigen, scores = _covariance_route(centered, grids, cfg, cfg.d, stage, report)
    return _finish("dmfpca", eigen, scores, mean_d, sample.ids, report, stage)


def differentiate_on_grid(values: np.ndarray, points: np.ndarray, d: int) -> np.ndarray:
    """``d``-fold central differences along the last axis, second-order one-sided at the ends."""
    out = np.asarray(values, dtype=float)
    for _ in range(d):
        out = np.gradient(out, points, axis=-1, edge_order=2)
    return out


def fit_dmkl(sample: FunctionalSample, cfg: FitConfig | None = None, differentiate=differentiate_on_grid) -> FitResult:
    """Derivatives of the multivariate Karhunen-Loeve expansion, re-analysed by MFPCA.

    ``differentiate(values, points, d)`` turns eigenfunction rows into their
    ``d``-th derivatives; finite differences by default.
    """
    cfg = cfg or FitConfig()
    stage, report = _Stages(), {"method": "dmkl", "d": cfg.d, "K": cfg.K}
    _, grids, centered, mean_d = _center(sample, cfg, stage)
    first_report: dict = {}
    eig0, rho0 = _covariance_route(centered, grids, cfg, 0, stage, first_report)
    report["first_stage"] = first_report
    with stage("differentiate"):
        dpsi = [differentiate(f, g.points, cfg.d) for f, g in zip(eig0.eigenfunctions, grids)]
        initial = DenseCurves(grids, [rho0.scores @ f for f in dpsi])
    with stage("mfpca"):
        eigen, scores, _ = dense_mfpca(initial, cfg.K, cfg.n_components, center=False, d=cfg.d)
    return _finish("dmkl", eigen, scores, mean_d, sample.ids, report, stage)


def smooth_derivatives(sample: FunctionalSample, grids, cfg: FitConfig):
    """Per-subject P-spline fits differentiated on ``grids``.

    Unless ``cfg.spline.lam`` fixes it, each feature gets one smoothing
    parameter chosen by GCV pooled over all subjects. Subjects whose fit is
    ill-posed on any feature are excluded.

    Returns
    -------
    curves : DenseCurves
        Derivative curves of the kept subjects.
    kept : list of int
        Indices of the kept subjects.
    lambdas : list of float
        The smoothing parameter used for each feature.
    """
    spline = cfg.spline
    N, P = sample.n_subjects, sample.n_features
    out = np.full((P, N, max(len(g) for g in grids)), np.nan)
    ok = np.ones(N, dtype=bool)
    lambdas = []
    for p, g in enumerate(grids):
        basis = spline.basis(sample.domains[p])
        deriv_design = basis.design(g.points, cfg.d)
        usable = [i for i in range(N) if np.unique(sample.times[i][p]).size >= spline.penalty_order + 1]
        ok[np.setdiff1d(np.arange(N), usable)] = False
        if spline.lam is not None:
            lam = spline.lam
        else:
            curves = [(sample.times[i][p], sample.values[i][p]) for i in usable]
            lam = select_lambda_pooled(curves, basis, spline.penalty_order, spline.lambda_grid)
        lambdas.append(float(lam))
        for i in usable:
            try:
                fit = fit_curve(sample.times[i][p], sample.values[i][p], basis, lam, spline.penalty_order)
            except IllPosedFitError:
                ok[i] = False
                continue
            out[p, i, : len(g)] = deriv_design @ fit.coefficients
    kept = np.flatnonzero(ok).tolist()
    curves = DenseCurves(grids, [out[p, kept, : len(g)] for p, g in enumerate(grids)])
    return curves, kept, lambdas


def fit_direct(sample: FunctionalSample, cfg: FitConfig | None = None) -> FitResult:
    """MFPCA of per-curve P-spline derivative estimates."""
    cfg = cfg or FitConfig()
    stage, report = _Stages(), {"method": "direct", "d": cfg.d, "K": cfg.K}
    _, grids, centered, mean_d = _center(sample, cfg, stage)
    with stage("smooth"):
        curves, kept, lambdas = smooth_derivatives(centered, grids, cfg)
        report["excluded_subjects"] = sample.n_subjects - len(kept)
        report["lambda"] = lambdas
        if len(kept) < 2:
            raise InvalidArgumentError("fewer than two subjects could be smoothed")
    with stage("mfpca"):
        eigen, scores, _ = dense_mfpca(curves, cfg.K, cfg.n_components, center=False, d=cfg.d)
    ids = [sample.ids[i] for i in kept]
    return _finish("direct", eigen, scores, mean_d, ids, report, stage)


FITTERS = {"dmfpca": fit_dmfpca, "dmkl": fit_dmkl, "direct": fit_direct, "mfpca": fit_mfpca}


def fit(sample: FunctionalSample, method: str, cfg: FitConfig | None = None) -> FitResult:
    try:
        fitter = FITTERS[method]
    except KeyError:
        raise InvalidArgumentError(f"unknown method {method!r}; choose from {sorted(FITTERS)}") from None
    return fitter(sample, cfg)
