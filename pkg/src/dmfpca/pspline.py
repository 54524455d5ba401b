"""Penalized B-spline (P-spline) smoothing of curves and tensor-product surfaces.

Curves minimise ``sum_j w_j (y_j - f(t_j))^2 + lam * ||D c||^2`` where ``D``
is the ``penalty_order``-th difference matrix acting on the B-spline
coefficients ``c``. Surfaces use a separate difference penalty along each
axis. Derivatives are evaluated analytically: the derivative of a degree-q
spline is a degree-(q-1) spline on the inner knots whose coefficients are
scaled first differences of the original ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.interpolate import BSpline

from dmfpca.errors import IllPosedFitError, InvalidArgumentError, OutOfDomainError

#: interior knots per unit length of the domain
KNOTS_PER_UNIT = 30
DEFAULT_LAMBDA_GRID = np.logspace(-6, 3, 19)


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    """B-spline basis of a given degree.

    The domain is ``[knots[degree], knots[-degree - 1]]``. Both clamped and
    extended (equally spaced beyond the domain) knot vectors are accepted;
    :meth:`uniform` builds the extended kind, for which polynomials of degree
    below the penalty order lie exactly in the penalty null space.
    """

    knots: np.ndarray
    degree: int = 3

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        q = int(self.degree)
        if q < 0:
            raise InvalidArgumentError("degree must be nonnegative")
        if knots.ndim != 1 or knots.size < 2 * (q + 1):
            raise InvalidArgumentError("too few knots for the requested degree")
        if np.any(np.diff(knots) < 0):
            raise InvalidArgumentError("knots must be nondecreasing")
        if not knots[q + 1] > knots[q] or not knots[-q - 1] > knots[-q - 2]:
            raise InvalidArgumentError("the basis domain must have positive length")
        knots.flags.writeable = False
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "degree", q)

    @classmethod
    def uniform(cls, domain, n_interior: int | None = None, degree: int = 3) -> "BSplineBasis":
        """Equally spaced knots on ``domain``, continued past both ends.

        By default there are ``KNOTS_PER_UNIT`` interior knots per unit length.
        """
        lo, hi = map(float, domain)
        if not hi > lo:
            raise InvalidArgumentError(f"degenerate domain {domain!r}")
        if n_interior is None:
            n_interior = max(1, int(round(KNOTS_PER_UNIT * (hi - lo))))
        h = (hi - lo) / (n_interior + 1)
        knots = lo + h * np.arange(-degree, n_interior + degree + 2)
        knots[degree], knots[-degree - 1] = lo, hi
        return cls(knots, degree)

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def n_interior(self) -> int:
        return self.knots.size - 2 * (self.degree + 1)

    @property
    def domain(self) -> tuple[float, float]:
        q = self.degree
        return float(self.knots[q]), float(self.knots[-q - 1])

    def _check_x(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.domain
        tol = 1e-12 * (hi - lo)
        if x.size and (x.min() < lo - tol or x.max() > hi + tol):
            raise OutOfDomainError(f"evaluation points outside basis domain [{lo}, {hi}]")
        return np.clip(x, lo, hi)

    def derivative_operator(self, d: int) -> np.ndarray:
        """Matrix mapping coefficients to those of the ``d``-th derivative.

        The result has shape ``(n_basis - d, n_basis)``; the derivative spline
        has degree ``degree - d`` on ``knots[d:-d]``.
        """
        if d < 0 or d > self.degree:
            raise InvalidArgumentError(f"derivative order {d} not in [0, {self.degree}]")
        t, q = self.knots, self.degree
        op = np.eye(self.n_basis)
        for r in range(d):
            deg = q - r
            n = op.shape[0]
            span = t[r + 1 + deg : r + n + deg] - t[r + 1 : r + n]
            step = np.zeros((n - 1, n))
            idx = np.arange(n - 1)
            step[idx, idx] = -deg / span
            step[idx, idx + 1] = deg / span
            op = step @ op
        return op

    def design(self, x, d: int = 0) -> np.ndarray:
        """Dense matrix of the ``d``-th derivatives of all basis functions at ``x``."""
        if d < 0 or d > self.degree:
            raise InvalidArgumentError(f"derivative order {d} not in [0, {self.degree}]")
        x = self._check_x(x)
        t = self.knots if d == 0 else self.knots[d:-d]
        base = BSpline.design_matrix(x, t, self.degree - d).toarray()
        if d == 0:
            return base
        return base @ self.derivative_operator(d)

    def local(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Start index and values of the ``degree + 1`` nonzero basis functions at ``x``."""
        x = self._check_x(x)
        q = self.degree
        left = np.searchsorted(self.knots, x, side="right") - 1
        left = np.clip(left, q, self.n_basis - 1)
        start = left - q
        full = self.design(x)
        cols = start[:, None] + np.arange(q + 1)
        return start, np.take_along_axis(full, cols, axis=1)


def difference_matrix(n: int, order: int) -> np.ndarray:
    """``order``-th difference operator on ``n`` coefficients."""
    if order < 0 or order >= n:
        raise InvalidArgumentError(f"penalty order {order} invalid for {n} coefficients")
    return np.diff(np.eye(n), n=order, axis=0)


@dataclass(frozen=True, eq=False)
class PSplineFit:
    """A fitted P-spline curve."""

    basis: BSplineBasis
    coefficients: np.ndarray
    lam: float
    penalty_order: int = 2
    edf: float = float("nan")
    gcv: float = float("nan")

    def __call__(self, x, d: int = 0) -> np.ndarray:
        return self.basis.design(x, d) @ self.coefficients


def _check_lambda(lam):
    if not np.isfinite(lam) or lam < 0:
        raise InvalidArgumentError(f"smoothing parameter must be >= 0, got {lam}")


def _normal_equations(t, y, basis, weights):
    B = basis.design(t)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    BtW = B.T * w
    return BtW @ B, BtW @ y, float(np.sum(w * y * y)), float(np.sum(w))


def _cho(M):
    try:
        cf = sla.cho_factor(M, check_finite=False)
    except sla.LinAlgError:
        raise IllPosedFitError("penalized normal equations are not positive definite") from None
    diag = np.abs(np.diag(cf[0]))
    if diag.min() <= 1e-7 * diag.max():
        raise IllPosedFitError("penalized normal equations are numerically singular")
    return cf


def fit_curve(t, y, basis: BSplineBasis, lam: float, penalty_order: int = 2, weights=None) -> PSplineFit:
    """Fit a P-spline to scattered ``(t, y)`` data.

    Raises
    ------
    IllPosedFitError
        If the penalized normal equations are singular, e.g. when there are
        fewer than ``penalty_order`` distinct timepoints.
    """
    _check_lambda(lam)
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise InvalidArgumentError("t and y must be 1-d arrays of equal length")
    if np.unique(t).size < penalty_order + 1 and lam == 0:
        raise IllPosedFitError("too few distinct timepoints for an unpenalized fit")
    BtB, Bty, _, _ = _normal_equations(t, y, basis, weights)
    D = difference_matrix(basis.n_basis, penalty_order)
    M = BtB + lam * (D.T @ D)
    cf = _cho(M)
    coef = sla.cho_solve(cf, Bty, check_finite=False)
    edf = float(np.trace(sla.cho_solve(cf, BtB, check_finite=False)))
    return PSplineFit(basis, coef, float(lam), penalty_order, edf=edf)


def gcv_scores(t, y, basis: BSplineBasis, penalty_order: int, lambda_grid, weights=None) -> np.ndarray:
    """Generalized cross-validation score ``n RSS / (n - edf)^2`` for each lambda."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    BtB, Bty, yy, n = _normal_equations(t, y, basis, weights)
    P = difference_matrix(basis.n_basis, penalty_order)
    P = P.T @ P
    scores = np.full(len(lambda_grid), np.inf)
    for j, lam in enumerate(lambda_grid):
        try:
            cf = _cho(BtB + lam * P)
        except IllPosedFitError:
            continue
        c = sla.cho_solve(cf, Bty, check_finite=False)
        edf = np.trace(sla.cho_solve(cf, BtB, check_finite=False))
        rss = max(yy - 2 * c @ Bty + c @ BtB @ c, 0.0)
        if n - edf > 1e-8:
            scores[j] = n * rss / (n - edf) ** 2
    return scores


def pooled_gcv_scores(curves, basis: BSplineBasis, penalty_order: int, lambda_grid) -> np.ndarray:
    """GCV of one smoothing parameter shared by many independently fitted curves.

    ``curves`` is a sequence of ``(t, y)`` pairs. Residual sums of squares,
    observation counts and effective degrees of freedom are summed over
    curves before forming ``n RSS / (n - edf)^2``.
    """
    D = difference_matrix(basis.n_basis, penalty_order)
    P = D.T @ D
    systems = [_normal_equations(np.asarray(t, float), np.asarray(y, float), basis, None) for t, y in curves]
    if not systems:
        raise InvalidArgumentError("no curves to pool")
    scores = np.full(len(lambda_grid), np.inf)
    for j, lam in enumerate(lambda_grid):
        _check_lambda(lam)
        rss = edf = n = 0.0
        try:
            for BtB, Bty, yy, m in systems:
                cf = _cho(BtB + lam * P)
                c = sla.cho_solve(cf, Bty, check_finite=False)
                edf += np.trace(sla.cho_solve(cf, BtB, check_finite=False))
                rss += max(yy - 2 * c @ Bty + c @ BtB @ c, 0.0)
                n += m
        except IllPosedFitError:
            continue
        if n - edf > 1e-8:
            scores[j] = n * rss / (n - edf) ** 2
    return scores


def _argmin_prefer_larger(scores, grid) -> float:
    grid = np.asarray(grid, dtype=float)
    finite = np.isfinite(scores)
    if not finite.any():
        raise IllPosedFitError("no smoothing parameter in the grid gives a solvable fit")
    best = scores[finite].min()
    tol = 1e-10 * max(abs(best), np.finfo(float).tiny)
    ties = finite & (scores <= best + tol)
    return float(grid[ties].max())


def select_lambda_gcv(t, y, basis: BSplineBasis, penalty_order: int = 2, lambda_grid=None, weights=None) -> float:
    """Smoothing parameter minimising GCV over ``lambda_grid``.

    Ties go to the larger value.
    """
    grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise InvalidArgumentError("lambda grid is empty")
    if np.any(grid < 0):
        raise InvalidArgumentError("lambda grid values must be >= 0")
    if grid.size == 1:
        return float(grid[0])
    return _argmin_prefer_larger(gcv_scores(t, y, basis, penalty_order, grid, weights), grid)


def fit_curve_gcv(t, y, basis: BSplineBasis, penalty_order: int = 2, lambda_grid=None, weights=None) -> PSplineFit:
    lam = select_lambda_gcv(t, y, basis, penalty_order, lambda_grid, weights)
    return fit_curve(t, y, basis, lam, penalty_order, weights)


def eval_derivative(fit: PSplineFit, grid, d: int = 0) -> np.ndarray:
    """``d``-th derivative of a fitted curve at the points of ``grid``.

    ``grid`` may be a :class:`~dmfpca.fdata.Grid` or an array of points.
    """
    if d < 0 or d > fit.basis.degree:
        raise InvalidArgumentError(f"derivative order {d} exceeds spline degree {fit.basis.degree}")
    points = getattr(grid, "points", grid)
    return fit(points, d)


# -- surfaces ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SurfaceFit:
    """Tensor-product P-spline surface ``f(s, t) = B_s(s) C B_t(t)^T``."""

    basis_s: BSplineBasis
    basis_t: BSplineBasis
    coefficients: np.ndarray
    lambda_s: float
    lambda_t: float
    penalty_order: int = 2
    edf: float = float("nan")

    def __post_init__(self):
        shape = (self.basis_s.n_basis, self.basis_t.n_basis)
        if self.coefficients.shape != shape:
            raise InvalidArgumentError(f"coefficient matrix must have shape {shape}")

    def __call__(self, s, t, d_s: int = 0, d_t: int = 0) -> np.ndarray:
        """Tabulate a partial derivative on the product ``s x t``."""
        return self.basis_s.design(s, d_s) @ self.coefficients @ self.basis_t.design(t, d_t).T


@dataclass
class SurfaceSystem:
    """Penalized normal equations of a tensor-product fit, built once.

    Scattered points are first aggregated to their unique ``(s, t)``
    locations, which keeps dense covariance problems small.
    """

    basis_s: BSplineBasis
    basis_t: BSplineBasis
    A: np.ndarray
    b: np.ndarray
    yy: float
    n: float
    P_s: np.ndarray
    P_t: np.ndarray
    penalty_order: int = 2
    _eig: tuple | None = field(default=None, repr=False)

    @classmethod
    def build(cls, s, t, v, basis_s, basis_t, penalty_order=2, weights=None) -> "SurfaceSystem":
        s = np.asarray(s, dtype=float).ravel()
        t = np.asarray(t, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()
        if not (s.shape == t.shape == v.shape):
            raise InvalidArgumentError("s, t and values must have equal length")
        if s.size == 0:
            raise IllPosedFitError("no points to fit")
        w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float).ravel()
        us, i_s = np.unique(s, return_inverse=True)
        ut, i_t = np.unique(t, return_inverse=True)
        code = i_s * ut.size + i_t
        ucode, inv = np.unique(code, return_inverse=True)
        cnt = np.bincount(inv, weights=w)
        tot = np.bincount(inv, weights=w * v)
        ps, pt = ucode // ut.size, ucode % ut.size

        q_s, q_t = basis_s.degree, basis_t.degree
        start_s, val_s = basis_s.local(us)
        start_t, val_t = basis_t.local(ut)
        nbt = basis_t.n_basis
        nb = basis_s.n_basis * nbt
        rows = np.repeat(np.arange(ucode.size), (q_s + 1) * (q_t + 1))
        cols = (
            (start_s[ps][:, None, None] + np.arange(q_s + 1)[None, :, None]) * nbt
            + start_t[pt][:, None, None]
            + np.arange(q_t + 1)[None, None, :]
        ).ravel()
        data = (val_s[ps][:, :, None] * val_t[pt][:, None, :]).ravel()
        X = sp.csr_matrix((data, (rows, cols)), shape=(ucode.size, nb))
        A = (X.T @ sp.diags(cnt) @ X).toarray()
        b = X.T @ tot
        Ds = difference_matrix(basis_s.n_basis, penalty_order)
        Dt = difference_matrix(nbt, penalty_order)
        P_s = np.kron(Ds.T @ Ds, np.eye(nbt))
        P_t = np.kron(np.eye(basis_s.n_basis), Dt.T @ Dt)
        return cls(basis_s, basis_t, A, b, float(np.sum(w * v * v)), float(np.sum(w)), P_s, P_t, penalty_order)

    def solve(self, lambda_s: float, lambda_t: float) -> SurfaceFit:
        _check_lambda(lambda_s)
        _check_lambda(lambda_t)
        cf = _cho(self.A + lambda_s * self.P_s + lambda_t * self.P_t)
        c = sla.cho_solve(cf, self.b, check_finite=False)
        shape = (self.basis_s.n_basis, self.basis_t.n_basis)
        return SurfaceFit(
            self.basis_s, self.basis_t, c.reshape(shape), float(lambda_s), float(lambda_t), self.penalty_order
        )

    def _eigen(self):
        # simultaneous diagonalisation: V^T A V = diag(mu), V^T (A + scale P) V = I
        if self._eig is None:
            P = self.P_s + self.P_t
            scale = np.trace(self.A) / max(np.trace(P), 1e-300)
            try:
                mu, V = sla.eigh(self.A, self.A + scale * P, check_finite=False)
            except sla.LinAlgError:
                raise IllPosedFitError("surface design is degenerate") from None
            self._eig = (np.clip(mu, 0.0, 1.0), V, scale, V.T @ self.b)
        return self._eig

    def gcv_scores(self, lambda_grid) -> np.ndarray:
        """GCV score for each common smoothing parameter ``lambda_s = lambda_t``."""
        mu, V, scale, Vb = self._eigen()
        out = np.empty(len(lambda_grid))
        for j, lam in enumerate(lambda_grid):
            denom = mu + (lam / scale) * (1.0 - mu)
            with np.errstate(divide="ignore", invalid="ignore"):
                g = np.where(denom > 0, Vb / denom, 0.0)
                edf = float(np.sum(np.where(denom > 0, mu / denom, 0.0)))
            # c = V g ; c^T b = g.Vb ; c^T A c = sum mu g^2
            rss = max(self.yy - 2 * g @ Vb + np.sum(mu * g * g), 0.0)
            out[j] = self.n * rss / (self.n - edf) ** 2 if self.n - edf > 1e-8 else np.inf
        return out

    def select_lambda(self, lambda_grid=None) -> float:
        grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
        if grid.size == 0:
            raise InvalidArgumentError("lambda grid is empty")
        if grid.size == 1:
            return float(grid[0])
        return _argmin_prefer_larger(self.gcv_scores(grid), grid)


def select_lambda_pooled(curves, basis: BSplineBasis, penalty_order: int = 2, lambda_grid=None) -> float:
    """Grid minimiser of :func:`pooled_gcv_scores`, ties going to the larger value."""
    grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise InvalidArgumentError("lambda grid is empty")
    if grid.size == 1:
        return float(grid[0])
    return _argmin_prefer_larger(pooled_gcv_scores(curves, basis, penalty_order, grid), grid)


def surface_cv_scores(folds, lambda_grid) -> np.ndarray:
    """Fold cross-validation error of a common smoothing parameter.

    ``folds`` are systems built from disjoint parts of the data (typically
    disjoint groups of subjects). For every fold the surface is fitted to
    the remaining folds and its squared error on the held-out fold is
    accumulated.
    """
    folds = list(folds)
    if len(folds) < 2:
        raise InvalidArgumentError("cross-validation needs at least two folds")
    A = sum(f.A for f in folds)
    b = sum(f.b for f in folds)
    P = folds[0].P_s + folds[0].P_t
    out = np.zeros(len(lambda_grid))
    for f in folds:
        A_tr, b_tr = A - f.A, b - f.b
        for j, lam in enumerate(lambda_grid):
            _check_lambda(lam)
            try:
                c = sla.cho_solve(_cho(A_tr + lam * P), b_tr, check_finite=False)
            except IllPosedFitError:
                out[j] = np.inf
                continue
            out[j] += f.yy - 2 * c @ f.b + c @ f.A @ c
    return out


def select_lambda_cv(folds, lambda_grid=None) -> float:
    """Grid minimiser of :func:`surface_cv_scores`, ties going to the larger value."""
    grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise InvalidArgumentError("lambda grid is empty")
    if grid.size == 1:
        return float(grid[0])
    return _argmin_prefer_larger(surface_cv_scores(folds, grid), grid)


def fit_surface(
    s, t, values, basis_s: BSplineBasis, basis_t: BSplineBasis, lambda_s: float, lambda_t: float,
    penalty_order: int = 2, weights=None,
) -> SurfaceFit:
    """Tensor-product P-spline fit to scattered ``(s, t, value)`` points."""
    system = SurfaceSystem.build(s, t, values, basis_s, basis_t, penalty_order, weights)
    return system.solve(lambda_s, lambda_t)


def eval_surface_partial(fit: SurfaceFit, grid_s, grid_t, d_s: int = 0, d_t: int = 0) -> np.ndarray:
    """Tabulate ``d^{d_s}/ds d^{d_t}/dt f`` on ``grid_s x grid_t``."""
    if not (0 <= d_s <= fit.basis_s.degree and 0 <= d_t <= fit.basis_t.degree):
        raise InvalidArgumentError("derivative order exceeds spline degree")
    return fit(getattr(grid_s, "points", grid_s), getattr(grid_t, "points", grid_t), d_s, d_t)


@dataclass(frozen=True)
class SplineConfig:
    """Basis and penalty settings shared by every smoothing step.

    ``lam=None`` selects the smoothing parameter over ``lambda_grid``: by
    GCV for curves, and for covariance surfaces by ``surface_selector``,
    either ``"cv"`` (``cv_folds``-fold cross-validation over subjects) or
    ``"gcv"``. Surfaces use ``surface_knots_per_unit`` interior knots per
    unit length along each axis (``None`` means ``knots_per_unit``).
    """

    knots_per_unit: float = KNOTS_PER_UNIT
    degree: int = 3
    penalty_order: int = 2
    lam: float | None = None
    lambda_grid: tuple = tuple(DEFAULT_LAMBDA_GRID)
    surface_knots_per_unit: float | None = 15.0
    surface_selector: str = "cv"
    cv_folds: int = 5

    def __post_init__(self):
        if self.lam is not None:
            _check_lambda(self.lam)
        if self.degree < 1:
            raise InvalidArgumentError("spline degree must be >= 1")
        if self.penalty_order < 1:
            raise InvalidArgumentError("penalty order must be >= 1")
        if self.surface_selector not in ("cv", "gcv"):
            raise InvalidArgumentError(f"unknown surface selector {self.surface_selector!r}")
        if self.cv_folds < 2:
            raise InvalidArgumentError("cv_folds must be >= 2")
        if self.knots_per_unit <= 0 or (self.surface_knots_per_unit is not None and self.surface_knots_per_unit <= 0):
            raise InvalidArgumentError("knot density must be positive")

    def basis(self, domain, surface: bool = False) -> BSplineBasis:
        lo, hi = domain
        density = self.knots_per_unit
        if surface and self.surface_knots_per_unit is not None:
            density = self.surface_knots_per_unit
        n_interior = max(1, int(round(density * (hi - lo))))
        return BSplineBasis.uniform(domain, n_interior, self.degree)

    def fit(self, t, y, domain) -> PSplineFit:
        basis = self.basis(domain)
        if self.lam is not None:
            return fit_curve(t, y, basis, self.lam, self.penalty_order)
        return fit_curve_gcv(t, y, basis, self.penalty_order, self.lambda_grid)
