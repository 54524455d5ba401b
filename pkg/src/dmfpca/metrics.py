"""Accuracy metrics for estimated eigenvalues, eigenfunctions and curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmfpca.errors import InvalidArgumentError, UndefinedMetricError
from dmfpca.fdata import DenseCurves

METRICS = ("RE", "ISE", "RMISE")


@dataclass(frozen=True)
class MetricRow:
    metric: str
    component: int | None
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise InvalidArgumentError(f"unknown metric {self.metric!r}")
        if not self.value >= 0:
            raise InvalidArgumentError(f"metric values are nonnegative, got {self.value}")


def re(true_eigvals, est_eigvals) -> np.ndarray:
    """Relative eigenvalue errors ``|nu - nu_hat| / nu``."""
    nu = np.asarray(true_eigvals, dtype=float)
    est = np.asarray(est_eigvals, dtype=float)
    if nu.shape != est.shape:
        raise InvalidArgumentError("eigenvalue vectors differ in length")
    if np.any(nu <= 0):
        raise InvalidArgumentError("true eigenvalues must be positive")
    return np.abs(nu - est) / nu


def _check_grids(grids_a, grids_b):
    if len(grids_a) != len(grids_b) or any(a != b for a, b in zip(grids_a, grids_b)):
        raise InvalidArgumentError("eigenfunctions are tabulated on different grids")


def ise(true_psi, est_psi, grids) -> np.ndarray:
    """Integrated squared error per component, after choosing the better sign.

    ``true_psi`` and ``est_psi`` are sequences (one per feature) of
    ``K x len(grid)`` matrices.
    """
    if len(true_psi) != len(grids) or len(est_psi) != len(grids):
        raise InvalidArgumentError("one eigenfunction matrix per grid is required")
    out = None
    plus = minus = 0.0
    for a, b, g in zip(true_psi, est_psi, grids):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        if a.shape != b.shape or a.shape[1] != len(g):
            raise InvalidArgumentError("eigenfunction shapes do not match the grids")
        plus = plus + ((a - b) ** 2) @ g.weights
        minus = minus + ((a + b) ** 2) @ g.weights
    out = np.minimum(plus, minus)
    return np.asarray(out)


def ise_systems(truth, estimate) -> np.ndarray:
    """:func:`ise` between two multivariate eigensystems, components matched by rank."""
    _check_grids(truth.grids, estimate.grids)
    K = min(truth.K, estimate.K)
    return ise([f[:K] for f in truth.eigenfunctions], [f[:K] for f in estimate.eigenfunctions], truth.grids)


def rmise(true_derivs: DenseCurves, est_derivs: DenseCurves) -> float:
    """Relative mean integrated squared error, averaged over features."""
    _check_grids(true_derivs.grids, est_derivs.grids)
    if true_derivs.n_subjects != est_derivs.n_subjects:
        raise InvalidArgumentError("curve sets have different numbers of subjects")
    ratios = []
    for p, g in enumerate(true_derivs.grids):
        x, xh = true_derivs.values[p], est_derivs.values[p]
        den = np.sum((x**2) @ g.weights)
        if not den > 0:
            raise UndefinedMetricError(f"feature {p + 1} has zero energy")
        ratios.append(np.sum(((x - xh) ** 2) @ g.weights) / den)
    return float(np.mean(ratios))


def metric_rows(truth_eigen, truth_curves: DenseCurves, est_eigen, est_curves: DenseCurves) -> list[MetricRow]:
    """RE and ISE per component plus one RMISE row."""
    K = min(truth_eigen.K, est_eigen.K)
    rows = [MetricRow("RE", k + 1, float(v))
            for k, v in enumerate(re(truth_eigen.eigenvalues[:K], est_eigen.eigenvalues[:K]))]
    rows += [MetricRow("ISE", k + 1, float(v)) for k, v in enumerate(ise_systems(truth_eigen, est_eigen))]
    rows.append(MetricRow("RMISE", None, rmise(truth_curves, est_curves)))
    return rows
