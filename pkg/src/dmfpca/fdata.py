"""Containers for irregularly sampled multivariate functional data.

A sample holds ``N`` subjects, each with ``P`` features. Every (subject,
feature) pair is a list of ``(t, y)`` observations that need not share
timepoints with any other pair. Dense, grid-tabulated curves (means,
derivative estimates, reconstructions) live in :class:`DenseCurves`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from dmfpca.errors import DataFormatError, InvalidArgumentError, OutOfDomainError


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Ordered evaluation points with trapezoidal quadrature weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = _frozen(self.points)
        weights = _frozen(self.weights)
        if points.ndim != 1 or points.size < 2:
            raise InvalidArgumentError("a grid needs at least two points")
        if np.any(np.diff(points) <= 0):
            raise InvalidArgumentError("grid points must be strictly increasing")
        if weights.shape != points.shape:
            raise InvalidArgumentError("weights and points differ in length")
        if np.any(weights < 0):
            raise InvalidArgumentError("quadrature weights must be nonnegative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_points(cls, points) -> "Grid":
        """Build a grid on arbitrary increasing points with trapezoid weights."""
        points = np.asarray(points, dtype=float)
        h = np.diff(points)
        weights = np.zeros_like(points)
        weights[:-1] += h / 2
        weights[1:] += h / 2
        return cls(points, weights)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.points[0]), float(self.points[-1])

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(
            self.weights, other.weights
        )

    __hash__ = None


class Observation(NamedTuple):
    t: float
    y: float


def make_uniform_grid(interval, n_points: int) -> Grid:
    """Equidistant grid on ``interval`` with trapezoidal weights.

    >>> g = make_uniform_grid((0.0, 1.0), 2)
    >>> g.weights.tolist()
    [0.5, 0.5]
    """
    lo, hi = map(float, interval)
    if n_points < 2:
        raise InvalidArgumentError(f"n_points must be >= 2, got {n_points}")
    if not hi > lo:
        raise InvalidArgumentError(f"degenerate interval {interval!r}")
    points = np.linspace(lo, hi, n_points)
    h = (hi - lo) / (n_points - 1)
    weights = np.full(n_points, h)
    weights[0] = weights[-1] = h / 2
    return Grid(points, weights)


def integrate(grid: Grid, f) -> float | np.ndarray:
    """Trapezoidal integral of values tabulated on ``grid``.

    ``f`` may be a vector of length ``len(grid)`` or an array whose last axis
    has that length, in which case the integral is taken along the last axis.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1:] != grid.points.shape:
        raise InvalidArgumentError(
            f"integrand has length {f.shape[-1:]} but grid has {len(grid)} points"
        )
    out = f @ grid.weights
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class FunctionalSample:
    """Irregular observations of ``N`` subjects on ``P`` features.

    Attributes
    ----------
    ids : tuple of str
        Subject identifiers, in order.
    domains : tuple of (float, float)
        Per-feature domain.
    times, values : tuple of tuple of ndarray
        ``times[i][p]`` and ``values[i][p]`` are the sorted timepoints and
        observed values of subject ``i`` on feature ``p``.
    """

    ids: tuple
    domains: tuple
    times: tuple
    values: tuple

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        domains = tuple((float(a), float(b)) for a, b in self.domains)
        n, n_feat = len(ids), len(domains)
        if len(self.times) != n or len(self.values) != n:
            raise InvalidArgumentError("times/values must have one entry per subject")
        times, values = [], []
        for i in range(n):
            if len(self.times[i]) != n_feat or len(self.values[i]) != n_feat:
                raise InvalidArgumentError(f"subject {ids[i]} does not have {n_feat} features")
            ti_row, yi_row = [], []
            for p in range(n_feat):
                t = np.asarray(self.times[i][p], dtype=float)
                y = np.asarray(self.values[i][p], dtype=float)
                if t.shape != y.shape or t.ndim != 1:
                    raise InvalidArgumentError(
                        f"subject {ids[i]} feature {p + 1}: t and y differ in shape"
                    )
                lo, hi = domains[p]
                if t.size and (t.min() < lo or t.max() > hi):
                    raise OutOfDomainError(
                        f"subject {ids[i]} feature {p + 1}: timepoint outside [{lo}, {hi}]"
                    )
                order = np.argsort(t, kind="stable")
                ti_row.append(_frozen(t[order]))
                yi_row.append(_frozen(y[order]))
            times.append(tuple(ti_row))
            values.append(tuple(yi_row))
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "times", tuple(times))
        object.__setattr__(self, "values", tuple(values))

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_features(self) -> int:
        return len(self.domains)

    def observations(self, i: int, p: int) -> list[Observation]:
        return [Observation(float(t), float(y)) for t, y in zip(self.times[i][p], self.values[i][p])]

    def n_obs(self, p: int) -> np.ndarray:
        """Number of observations per subject on feature ``p``."""
        return np.array([self.times[i][p].size for i in range(self.n_subjects)])

    def pooled(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        """All ``(t, y)`` pairs of feature ``p`` concatenated over subjects."""
        t = np.concatenate([self.times[i][p] for i in range(self.n_subjects)])
        y = np.concatenate([self.values[i][p] for i in range(self.n_subjects)])
        return t, y

    def with_values(self, values) -> "FunctionalSample":
        return FunctionalSample(self.ids, self.domains, self.times, values)

    def subset(self, index) -> "FunctionalSample":
        index = list(index)
        return FunctionalSample(
            [self.ids[i] for i in index],
            self.domains,
            [self.times[i] for i in index],
            [self.values[i] for i in index],
        )

    def __eq__(self, other):
        if not isinstance(other, FunctionalSample):
            return NotImplemented
        if self.ids != other.ids or self.domains != other.domains:
            return False
        return all(
            np.array_equal(a, b) and np.array_equal(c, d)
            for ta, tb, ya, yb in zip(self.times, other.times, self.values, other.values)
            for a, b, c, d in zip(ta, tb, ya, yb)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DenseCurves:
    """Curves tabulated on one grid per feature.

    ``values[p]`` has shape ``(n_subjects, len(grids[p]))``.
    """

    grids: tuple
    values: tuple

    def __post_init__(self):
        grids = tuple(self.grids)
        if len(self.values) != len(grids):
            raise InvalidArgumentError("one value matrix per grid is required")
        values = []
        for g, v in zip(grids, self.values):
            v = _frozen(np.atleast_2d(v))
            if v.shape[1] != len(g):
                raise InvalidArgumentError(
                    f"curves have {v.shape[1]} columns but grid has {len(g)} points"
                )
            values.append(v)
        if len({v.shape[0] for v in values}) > 1:
            raise InvalidArgumentError("features disagree on the number of subjects")
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "values", tuple(values))

    @property
    def n_subjects(self) -> int:
        return self.values[0].shape[0]

    @property
    def n_features(self) -> int:
        return len(self.grids)

    def curve(self, i: int, p: int) -> np.ndarray:
        return self.values[p][i]

    def __add__(self, other):
        _check_compatible(self, other)
        return DenseCurves(self.grids, [a + b for a, b in zip(self.values, other.values)])

    def __sub__(self, other):
        _check_compatible(self, other)
        return DenseCurves(self.grids, [a - b for a, b in zip(self.values, other.values)])

    def scaled(self, c: float) -> "DenseCurves":
        return DenseCurves(self.grids, [c * v for v in self.values])


def _check_compatible(a: DenseCurves, b: DenseCurves):
    if a.n_features != b.n_features or any(ga != gb for ga, gb in zip(a.grids, b.grids)):
        raise InvalidArgumentError("curves are tabulated on different grids")


def broadcast_curves(curves: DenseCurves, n_subjects: int) -> DenseCurves:
    """Repeat a single-row set of curves (e.g. a mean) for ``n_subjects`` rows."""
    return DenseCurves(curves.grids, [np.repeat(v[:1], n_subjects, axis=0) for v in curves.values])


def center(sample: FunctionalSample, mean_curves: DenseCurves) -> FunctionalSample:
    """Subtract a mean curve from every observation.

    The mean is taken from the first row of ``mean_curves`` and linearly
    interpolated between its grid points.
    """
    if mean_curves.n_features != sample.n_features:
        raise InvalidArgumentError("mean has a different number of features than the sample")
    new_values = []
    for i in range(sample.n_subjects):
        row = []
        for p in range(sample.n_features):
            grid = mean_curves.grids[p]
            t = sample.times[i][p]
            lo, hi = grid.domain
            if t.size and (t.min() < lo or t.max() > hi):
                raise OutOfDomainError(
                    f"subject {sample.ids[i]} feature {p + 1}: timepoint outside mean grid [{lo}, {hi}]"
                )
            row.append(sample.values[i][p] - np.interp(t, grid.points, mean_curves.values[p][0]))
        new_values.append(row)
    return sample.with_values(new_values)


def sample_from_dense(curves: DenseCurves, ids: Sequence | None = None) -> FunctionalSample:
    """View dense curves as a fully observed irregular sample."""
    n = curves.n_subjects
    ids = list(range(n)) if ids is None else ids
    times = [[g.points for g in curves.grids] for _ in range(n)]
    values = [[curves.values[p][i] for p in range(curves.n_features)] for i in range(n)]
    return FunctionalSample(ids, [g.domain for g in curves.grids], times, values)


# -- CSV long format ---------------------------------------------------------

SAMPLE_HEADER = ["id", "feature", "t", "y"]


def fmt(x: float) -> str:
    return f"{x:.17g}"


def _id_key(s: str):
    try:
        return (0, int(s), s)
    except ValueError:
        return (1, 0, s)


def write_sample_csv(sample: FunctionalSample, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_HEADER)
        for i, sid in enumerate(sample.ids):
            for p in range(sample.n_features):
                for t, y in zip(sample.times[i][p], sample.values[i][p]):
                    w.writerow([sid, p + 1, fmt(t), fmt(y)])


def read_sample_csv(path, domains=None) -> FunctionalSample:
    """Read a long-format ``id,feature,t,y`` file.

    Rows may come in any order. When ``domains`` is not given each feature's
    domain is the range of its observed timepoints.

    Raises
    ------
    DataFormatError
        On a bad header or an unparseable row; the message names the row.
    """
    rows: dict[tuple[str, int], list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SAMPLE_HEADER:
            raise DataFormatError(f"{path}: expected header {','.join(SAMPLE_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 4:
                raise DataFormatError(f"{path}: row {lineno}: expected 4 fields, got {len(rec)}")
            sid = rec[0].strip()
            try:
                feat = int(rec[1])
                t, y = float(rec[2]), float(rec[3])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
            if feat < 1:
                raise DataFormatError(f"{path}: row {lineno}: feature must be >= 1")
            if not (np.isfinite(t) and np.isfinite(y)):
                raise DataFormatError(f"{path}: row {lineno}: non-finite value")
            rows.setdefault((sid, feat), []).append((t, y))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    n_feat = max(f for _, f in rows)
    ids = sorted({s for s, _ in rows}, key=_id_key)
    times, values = [], []
    for sid in ids:
        trow, yrow = [], []
        for p in range(1, n_feat + 1):
            pairs = sorted(rows.get((sid, p), []))
            trow.append(np.array([a for a, _ in pairs], dtype=float))
            yrow.append(np.array([b for _, b in pairs], dtype=float))
        times.append(trow)
        values.append(yrow)
    if domains is None:
        domains = []
        for p in range(n_feat):
            allt = np.concatenate([times[i][p] for i in range(len(ids))])
            if allt.size == 0:
                raise DataFormatError(f"{path}: feature {p + 1} has no observations")
            domains.append((allt.min(), allt.max()))
    return FunctionalSample(ids, domains, times, values)


def write_curves_csv(curves: DenseCurves, path, ids=None) -> None:
    """Write dense curves as ``id,feature,t,value`` rows."""
    ids = list(range(curves.n_subjects)) if ids is None else list(ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "feature", "t", "value"])
        for i, sid in enumerate(ids):
            for p, g in enumerate(curves.grids):
                for t, v in zip(g.points, curves.values[p][i]):
                    w.writerow([sid, p + 1, fmt(t), fmt(v)])


def read_curves_csv(path) -> tuple[list[str], DenseCurves]:
    """Read curves written by :func:`write_curves_csv`.

    All subjects of a feature must share the same timepoints.
    """
    data: dict[int, dict[str, list[tuple[float, float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "feature", "t", "value"]:
            raise DataFormatError(f"{path}: expected header id,feature,t,value")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                sid, feat, t, v = rec[0].strip(), int(rec[1]), float(rec[2]), float(rec[3])
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
            data.setdefault(feat, {}).setdefault(sid, []).append((t, v))
    if not data:
        raise DataFormatError(f"{path}: no data rows")
    feats = sorted(data)
    ids = sorted(data[feats[0]], key=_id_key)
    grids, values = [], []
    for f in feats:
        if sorted(data[f], key=_id_key) != ids:
            raise DataFormatError(f"{path}: feature {f} has a different set of subjects")
        ref = None
        mat = []
        for sid in ids:
            pairs = sorted(data[f][sid])
            t = np.array([a for a, _ in pairs])
            if ref is None:
                ref = t
            elif not np.array_equal(ref, t):
                raise DataFormatError(f"{path}: feature {f} subject {sid} is on a different grid")
            mat.append([b for _, b in pairs])
        grids.append(Grid.from_points(ref))
        values.append(np.array(mat))
    return ids, DenseCurves(grids, values)
