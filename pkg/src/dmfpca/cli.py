"""Command-line interface: ``simulate``, ``fit``, ``metrics`` and ``study``.

Exit codes: 0 success, 2 usage, 3 data, 4 numerical failure. With
``--json-errors`` failures are also reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from dmfpca import __version__
from dmfpca.errors import (
    DataFormatError,
    IllPosedFitError,
    InvalidArgumentError,
    OutOfDomainError,
    StageError,
    UndefinedMetricError,
)
from dmfpca.fdata import DenseCurves, FunctionalSample, Grid, fmt, read_curves_csv, read_sample_csv, write_curves_csv, write_sample_csv
from dmfpca.metrics import metric_rows
from dmfpca.mfpca import MultivariateEigenSystem
from dmfpca.pipelines import METHODS, SCORE_METHODS, FitConfig, fit
from dmfpca.pspline import SplineConfig
from dmfpca.simulation import DEFAULT_SEED, SETTINGS, SimSetting, generate
from dmfpca.study import STUDY_METHODS, run_study, write_study

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- manifests -----------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs=(), seed=None) -> Path:
    """Record what produced ``out_dir``: command, configuration, seed, version and input digests."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "inputs": {str(p): _digest(p) for p in inputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (set, tuple)):
        return list(x)
    return str(x)


# -- eigensystem files ---------------------------------------------------------


def write_truth_eigen(eigen: MultivariateEigenSystem, path) -> None:
    """``k,eigenvalue,feature,t,value`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "eigenvalue", "feature", "t", "value"])
        for k in range(eigen.K):
            for p, (f, g) in enumerate(zip(eigen.eigenfunctions, eigen.grids)):
                for t, v in zip(g.points, f[k]):
                    w.writerow([k + 1, fmt(eigen.eigenvalues[k]), p + 1, fmt(t), fmt(v)])


def write_fit_eigen(eigen: MultivariateEigenSystem, out_dir: Path) -> None:
    with open(out_dir / "eigenvalues.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "eigenvalue"])
        for k, v in enumerate(eigen.eigenvalues):
            w.writerow([k + 1, fmt(v)])
    with open(out_dir / "eigenfunctions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "k", "t", "value"])
        for p, (f, g) in enumerate(zip(eigen.eigenfunctions, eigen.grids)):
            for k in range(eigen.K):
                for t, v in zip(g.points, f[k]):
                    w.writerow([p + 1, k + 1, fmt(t), fmt(v)])


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or [h.strip() for h in head] != header:
            raise DataFormatError(f"{path}: expected header {','.join(header)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataFormatError(f"{path}: row {lineno}: expected {len(header)} fields")
            yield lineno, rec


def _assemble(path, eigvals: dict, funcs: dict) -> MultivariateEigenSystem:
    if not eigvals:
        raise DataFormatError(f"{path}: no eigenvalues")
    ks = sorted(eigvals)
    if ks != list(range(1, len(ks) + 1)):
        raise DataFormatError(f"{path}: components must be numbered 1..K")
    grids, mats = [], []
    for p in sorted(funcs):
        ref = None
        rows = []
        for k in ks:
            pairs = sorted(funcs[p].get(k, []))
            t = np.array([a for a, _ in pairs])
            if ref is None:
                ref = t
            elif not np.array_equal(ref, t):
                raise DataFormatError(f"{path}: feature {p} components are on different grids")
            rows.append([b for _, b in pairs])
        if ref.size < 2:
            raise DataFormatError(f"{path}: feature {p} needs at least two grid points")
        grids.append(Grid.from_points(ref))
        mats.append(np.array(rows))
    return MultivariateEigenSystem(0, np.array([eigvals[k] for k in ks]), tuple(mats), tuple(grids))


def _parse(path, lineno, fn, *vals):
    try:
        return fn(*vals)
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: row {lineno}: {exc}") from None


def read_eigensystem(directory) -> MultivariateEigenSystem:
    """Eigensystem from ``eigenvalues.csv`` + ``eigenfunctions.csv``, else ``truth_eigen.csv``."""
    d = Path(directory)
    eigvals: dict[int, float] = {}
    funcs: dict[int, dict[int, list]] = {}
    if (d / "eigenvalues.csv").exists():
        path = d / "eigenvalues.csv"
        for ln, (k, v) in _read_rows(path, ["k", "eigenvalue"]):
            eigvals[_parse(path, ln, int, k)] = _parse(path, ln, float, v)
        path = d / "eigenfunctions.csv"
        for ln, (p, k, t, v) in _read_rows(path, ["feature", "k", "t", "value"]):
            p, k, t, v = _parse(path, ln, lambda *a: (int(a[0]), int(a[1]), float(a[2]), float(a[3])), p, k, t, v)
            funcs.setdefault(p, {}).setdefault(k, []).append((t, v))
        return _assemble(d, eigvals, funcs)
    path = d / "truth_eigen.csv"
    if not path.exists():
        raise DataFormatError(f"{d}: neither eigenvalues.csv nor truth_eigen.csv found")
    for ln, (k, ev, p, t, v) in _read_rows(path, ["k", "eigenvalue", "feature", "t", "value"]):
        k, ev, p, t, v = _parse(
            path, ln, lambda *a: (int(a[0]), float(a[1]), int(a[2]), float(a[3]), float(a[4])), k, ev, p, t, v
        )
        eigvals[k] = ev
        funcs.setdefault(p, {}).setdefault(k, []).append((t, v))
    return _assemble(path, eigvals, funcs)


def read_derivative_curves(directory) -> tuple[list[str], DenseCurves]:
    """Curves from ``reconstruction.csv``, else ``truth_derivs.csv``."""
    d = Path(directory)
    for name in ("reconstruction.csv", "truth_derivs.csv"):
        if (d / name).exists():
            return read_curves_csv(d / name)
    raise DataFormatError(f"{d}: neither reconstruction.csv nor truth_derivs.csv found")


# -- commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    setting = SimSetting.named(args.setting, seed=args.seed, **({"n_subjects": args.n_subjects} if args.n_subjects else {}))
    if args.replication < 0:
        raise InvalidArgumentError("replication must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample, truth = generate(setting, args.replication, K=args.K)
    write_sample_csv(sample, out / "sample.csv")
    write_curves_csv(truth.derivatives, out / "truth_derivs.csv", sample.ids)
    write_truth_eigen(truth.eigen, out / "truth_eigen.csv")
    write_manifest(out, "simulate", {**asdict(setting), "replication": args.replication, "K": args.K}, seed=args.seed)
    return EXIT_OK


def _fit_config(args) -> FitConfig:
    spline = SplineConfig(
        lam=args.lam,
        knots_per_unit=args.knots_per_unit,
        surface_knots_per_unit=args.surface_knots_per_unit,
        surface_selector=args.surface_selector,
        cv_folds=args.cv_folds,
    )
    n_comp = args.n_components
    n_comp = int(n_comp) if float(n_comp).is_integer() and float(n_comp) >= 1 else float(n_comp)
    return FitConfig(d=args.d, K=args.K, n_components=n_comp, spline=spline, score_method=args.score_method,
                     n_grid=args.n_grid, assume_noise=not args.no_noise)


def cmd_fit(args) -> int:
    cfg = _fit_config(args)
    sample = read_sample_csv(args.input)
    if args.domain is not None:
        sample = FunctionalSample(sample.ids, [tuple(args.domain)] * sample.n_features, sample.times, sample.values)
    res = fit(sample, args.method, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fit_eigen(res.eigen, out)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "k", "value"])
        for sid, row in zip(res.ids, res.scores.scores):
            for k, v in enumerate(row):
                w.writerow([sid, k + 1, fmt(v)])
    write_curves_csv(res.reconstruction, out / "reconstruction.csv", res.ids)
    (out / "report.json").write_text(json.dumps(res.report, indent=2, default=_jsonable))
    config = {"method": args.method, **asdict(cfg), "domain": args.domain}
    write_manifest(out, "fit", config, inputs=[args.input])
    return EXIT_OK


def cmd_metrics(args) -> int:
    est_eig = read_eigensystem(args.estimate_dir)
    true_eig = read_eigensystem(args.truth_dir)
    est_ids, est_curves = read_derivative_curves(args.estimate_dir)
    true_ids, true_curves = read_derivative_curves(args.truth_dir)
    index = {s: i for i, s in enumerate(true_ids)}
    missing = [s for s in est_ids if s not in index]
    if missing:
        raise DataFormatError(f"estimate has subjects absent from the truth: {missing[:5]}")
    if len(est_ids) != len(true_ids):
        keep = [index[s] for s in est_ids]
        true_curves = DenseCurves(true_curves.grids, [v[keep] for v in true_curves.values])
    elif est_ids != true_ids:
        true_curves = DenseCurves(true_curves.grids, [v[[index[s] for s in est_ids]] for v in true_curves.values])
    rows = metric_rows(true_eig, true_curves, est_eig, est_curves)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "component", "value"])
        for r in rows:
            w.writerow([r.metric, "" if r.component is None else r.component, fmt(r.value)])
    est_dir, true_dir = Path(args.estimate_dir), Path(args.truth_dir)
    inputs = [p for d in (est_dir, true_dir) for p in sorted(d.glob("*.csv"))]
    write_manifest(out, "metrics", {"estimate_dir": str(est_dir), "truth_dir": str(true_dir)},
                   inputs=sorted(set(inputs)))
    return EXIT_OK


STUDY_KEYS = {"settings", "methods", "replications", "seed", "K", "d", "jobs", "n_subjects", "first_replication",
              "fit"}
FIT_KEYS = {"lam", "knots_per_unit", "surface_knots_per_unit", "surface_selector", "cv_folds", "n_components",
            "score_method", "n_grid", "assume_noise"}


def load_study_config(path) -> dict:
    """Parse and validate a study ``config.json``.

    Keys: ``settings``, ``methods``, ``replications`` (required); ``seed``,
    ``K``, ``d``, ``jobs``, ``n_subjects``, ``first_replication`` and a
    ``fit`` object with smoothing options (optional).
    """
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataFormatError(f"{path}: expected a JSON object")
    unknown = set(cfg) - STUDY_KEYS
    if unknown:
        raise InvalidArgumentError(f"unknown study config keys: {sorted(unknown)}")
    for key in ("settings", "methods", "replications"):
        if key not in cfg:
            raise InvalidArgumentError(f"study config lacks {key!r}")
    bad = set(cfg.get("fit", {})) - FIT_KEYS
    if bad:
        raise InvalidArgumentError(f"unknown fit options: {sorted(bad)}")
    return cfg


def _study_fit_config(cfg: dict) -> FitConfig:
    opts = dict(cfg.get("fit", {}))
    spline_opts = {k: opts.pop(k) for k in list(opts) if k in {"lam", "knots_per_unit", "surface_knots_per_unit",
                                                                 "surface_selector", "cv_folds"}}
    return FitConfig(d=int(cfg.get("d", 1)), K=int(cfg.get("K", 3)), spline=SplineConfig(**spline_opts), **opts)


def cmd_study(args) -> int:
    cfg = load_study_config(args.config)
    jobs = args.jobs if args.jobs is not None else cfg.get("jobs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_study(
        cfg["settings"], cfg["methods"], int(cfg["replications"]), int(cfg.get("K", 3)),
        seed=int(cfg.get("seed", DEFAULT_SEED)), jobs=jobs, out_dir=out, fit_config=_study_fit_config(cfg),
        n_subjects=cfg.get("n_subjects"), first_replication=int(cfg.get("first_replication", 0)),
    )
    write_study(result, out)
    write_manifest(out, "study", cfg, inputs=[args.config], seed=cfg.get("seed", DEFAULT_SEED))
    n_fail = len(result.failures)
    if n_fail:
        print(f"{n_fail} replication(s) failed; see summary.json", file=sys.stderr)
        if args.strict:
            return EXIT_NUMERIC
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmfpca", description="Principal components of derivatives of multivariate functional data.")
    parser.add_argument("--json-errors", action="store_true", help="also report failures as JSON on stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS,
                        help="also report failures as JSON on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate one benchmark replication")
    p.add_argument("--setting", required=True, choices=sorted(SETTINGS))
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("-K", "--K", type=int, default=3, dest="K", help="components of the truth eigensystem")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="estimate derivative eigencomponents from a long-format CSV")
    p.add_argument("input")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("-d", "--d", type=int, default=1, dest="d", help="derivative order")
    p.add_argument("-K", "--K", type=int, default=3, dest="K")
    p.add_argument("--n-components", type=float, default=0.99,
                   help="univariate truncation: a PVE threshold below 1 or a whole number of components")
    p.add_argument("--lam", type=float, default=None, help="fixed smoothing parameter (default: data-driven)")
    p.add_argument("--knots-per-unit", type=float, default=SplineConfig.knots_per_unit)
    p.add_argument("--surface-knots-per-unit", type=float, default=SplineConfig.surface_knots_per_unit)
    p.add_argument("--surface-selector", choices=("cv", "gcv"), default=SplineConfig.surface_selector)
    p.add_argument("--cv-folds", type=int, default=SplineConfig.cv_folds)
    p.add_argument("--score-method", choices=SCORE_METHODS, default="auto")
    p.add_argument("--n-grid", type=int, default=101)
    p.add_argument("--domain", type=float, nargs=2, default=None, metavar=("LO", "HI"),
                   help="domain of every feature (default: range of the observed times)")
    p.add_argument("--no-noise", action="store_true", help="keep the covariance diagonal; assume no noise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("metrics", parents=[common], help="RE, ISE and RMISE of an estimate against a truth directory")
    p.add_argument("estimate_dir")
    p.add_argument("truth_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("study", parents=[common], help="run a simulation study described by a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: config, then DMFPCA_JOBS)")
    p.add_argument("--strict", action="store_true", help="exit nonzero when any replication failed")
    p.set_defaults(func=cmd_study)
    return parser


def _classify(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _classify(exc.cause)
    if isinstance(exc, (UsageError, InvalidArgumentError)):
        return EXIT_USAGE
    if isinstance(exc, (DataFormatError, OutOfDomainError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (IllPosedFitError, UndefinedMetricError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_NUMERIC


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    json_errors = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except Exception as exc:
        code = _classify(exc)
        print(f"error: {exc}", file=sys.stderr)
        if json_errors:
            payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
                       "stage": getattr(exc, "stage", None)}
            print(json.dumps(payload), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
