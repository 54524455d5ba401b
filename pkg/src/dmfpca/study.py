"""Seeded Monte Carlo comparison of the estimators on the benchmark settings.

Work is split into one task per ``(setting, replication)``; every method of
a task is fitted to the same generated sample. With an output directory,
each finished ``(setting, method, replication)`` is stored as its own JSON
file, so an interrupted study resumes where it stopped. Results are
assembled in a fixed order regardless of completion order.
"""

from __future__ import annotations

import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dmfpca.errors import InvalidArgumentError
from dmfpca.fdata import DenseCurves
from dmfpca.metrics import metric_rows
from dmfpca.pipelines import METHODS, FitConfig, fit
from dmfpca.simulation import DEFAULT_SEED, SETTINGS, SimSetting, generate

#: pseudo-method scoring the truth bundle against itself (a plumbing check)
TRUTH = "truth"
STUDY_METHODS = METHODS + (TRUTH,)
JOBS_ENV = "DMFPCA_JOBS"
RAW_COLUMNS = ("setting", "method", "replication", "metric", "component", "value")


@dataclass(frozen=True)
class StudyRow:
    setting: str
    method: str
    replication: int
    metric: str
    component: int | None
    value: float


@dataclass(frozen=True)
class Failure:
    setting: str
    method: str
    replication: int
    error: str


@dataclass
class StudyResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def values(self, setting: str, method: str, metric: str, component: int | None = None) -> np.ndarray:
        """Metric values ordered by replication."""
        sel = [
            r for r in self.rows
            if r.setting == setting and r.method == method and r.metric == metric and r.component == component
        ]
        return np.array([r.value for r in sorted(sel, key=lambda r: r.replication)])

    def summary(self) -> dict:
        return summarize(self.rows, self.failures)


def default_jobs() -> int:
    """Worker count from the ``DMFPCA_JOBS`` environment variable, else 1."""
    raw = os.environ.get(JOBS_ENV)
    if raw is None:
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None
    if jobs < 1:
        raise InvalidArgumentError(f"{JOBS_ENV} must be >= 1")
    return jobs


def _truth_result(truth):
    # truth-as-input: the eigensystem and curves are compared with themselves
    return truth.eigen, truth.derivatives, None


def _score(truth, sample, method: str, cfg: FitConfig):
    if method == TRUTH:
        eigen, recon, ids = _truth_result(truth)
    else:
        res = fit(sample, method, cfg)
        eigen, recon, ids = res.eigen, res.reconstruction, res.ids
    target = truth.derivatives
    if ids is not None and tuple(ids) != tuple(sample.ids):
        index = {s: i for i, s in enumerate(sample.ids)}
        keep = [index[s] for s in ids]
        target = DenseCurves(target.grids, [v[keep] for v in target.values])
    return metric_rows(truth.eigen, target, eigen, recon)


def _task_path(out_dir: Path, setting: str, method: str, replication: int) -> Path:
    return out_dir / "raw" / setting / method / f"rep{replication:05d}.json"


def _run_task(setting: SimSetting, replication: int, methods, cfg: FitConfig, out_dir: str | None):
    """Fit ``methods`` on one replication; returns ``{method: payload}``."""
    sample, truth = generate(setting, replication, K=cfg.K)
    out = {}
    for method in methods:
        try:
            rows = [(r.metric, r.component, r.value) for r in _score(truth, sample, method, cfg)]
            payload = {"rows": rows, "error": None}
        except Exception as exc:  # recorded, not raised: one bad replication must not stop a study
            msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            payload = {"rows": [], "error": msg}
        if out_dir is not None:
            path = _task_path(Path(out_dir), setting.label, method, replication)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(payload))
            os.replace(tmp, path)
        out[method] = payload
    return out


def run_study(
    settings,
    methods,
    replications: int,
    K: int = 3,
    *,
    seed: int = DEFAULT_SEED,
    jobs: int | None = None,
    out_dir=None,
    fit_config: FitConfig | None = None,
    n_subjects: int | None = None,
    first_replication: int = 0,
) -> StudyResult:
    """Run every ``(setting, method, replication)`` and collect metric rows.

    Parameters
    ----------
    settings : sequence of str or SimSetting
    methods : sequence of str
        Any of ``dmfpca``, ``dmkl``, ``direct`` and ``truth``.
    replications : int
        Number of replications per setting, starting at ``first_replication``.
    K : int
        Components kept by every estimator and by the truth.
    jobs : int, optional
        Worker processes; defaults to ``DMFPCA_JOBS`` or 1.
    out_dir : path, optional
        Directory for per-task result files. Existing files are reused.
    """
    if replications < 1:
        raise InvalidArgumentError("replications must be >= 1")
    methods = tuple(methods)
    unknown = [m for m in methods if m not in STUDY_METHODS]
    if unknown or not methods:
        raise InvalidArgumentError(f"unknown methods {unknown}; choose from {STUDY_METHODS}")
    sims = []
    for s in settings:
        sim = s if isinstance(s, SimSetting) else SimSetting.named(s)
        overrides = {"seed": seed}
        if n_subjects is not None:
            overrides["n_subjects"] = n_subjects
        sims.append(replace(sim, **overrides))
    if not sims:
        raise InvalidArgumentError("no settings given")
    cfg = replace(fit_config or FitConfig(), K=K)
    jobs = default_jobs() if jobs is None else int(jobs)
    if jobs < 1:
        raise InvalidArgumentError("jobs must be >= 1")
    out = None if out_dir is None else Path(out_dir)

    done: dict[tuple, dict] = {}
    tasks = []
    for sim in sims:
        for rep in range(first_replication, first_replication + replications):
            todo = []
            for m in methods:
                path = None if out is None else _task_path(out, sim.label, m, rep)
                if path is not None and path.exists():
                    done[(sim.label, m, rep)] = json.loads(path.read_text())
                else:
                    todo.append(m)
            if todo:
                tasks.append((sim, rep, tuple(todo)))

    def collect(sim, rep, payloads):
        for m, payload in payloads.items():
            done[(sim.label, m, rep)] = payload

    if jobs == 1 or len(tasks) <= 1:
        for sim, rep, todo in tasks:
            collect(sim, rep, _run_task(sim, rep, todo, cfg, None if out is None else str(out)))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                (sim, rep, pool.submit(_run_task, sim, rep, todo, cfg, None if out is None else str(out)))
                for sim, rep, todo in tasks
            ]
            for sim, rep, fut in futures:
                collect(sim, rep, fut.result())

    result = StudyResult()
    for sim in sims:
        for m in methods:
            for rep in range(first_replication, first_replication + replications):
                payload = done[(sim.label, m, rep)]
                if payload["error"] is not None:
                    result.failures.append(Failure(sim.label, m, rep, payload["error"]))
                for metric, comp, value in payload["rows"]:
                    result.rows.append(StudyRow(sim.label, m, rep, metric, comp, float(value)))
    return result


def summarize(rows, failures=()) -> dict:
    """Distribution summaries per ``(setting, method, metric, component)``.

    Returns a JSON-ready dict with a ``metrics`` list and per
    ``(setting, method)`` failure counts and rates.
    """
    groups: dict[tuple, list] = {}
    reps: dict[tuple, set] = {}
    for r in rows:
        groups.setdefault((r.setting, r.method, r.metric, r.component), []).append(r.value)
        reps.setdefault((r.setting, r.method), set()).add(r.replication)
    fail: dict[tuple, int] = {}
    for f in failures:
        fail[(f.setting, f.method)] = fail.get((f.setting, f.method), 0) + 1
    metrics = []
    for (setting, method, metric, comp), vals in sorted(groups.items(), key=lambda kv: _sort_key(kv[0])):
        v = np.asarray(vals)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        metrics.append({
            "setting": setting, "method": method, "metric": metric, "component": comp, "n": int(v.size),
            "mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max()),
        })
    runs = []
    for key in sorted(set(reps) | set(fail)):
        ok, bad = len(reps.get(key, ())), fail.get(key, 0)
        runs.append({"setting": key[0], "method": key[1], "succeeded": ok, "failed": bad,
                     "failure_rate": bad / (ok + bad) if ok + bad else 0.0})
    return {"metrics": metrics, "runs": runs, "failures": sum(fail.values())}


def _sort_key(key):
    setting, method, metric, comp = key
    order = list(SETTINGS)
    return (order.index(setting) if setting in order else len(order), setting, method, metric, comp or 0)


def write_study(result: StudyResult, out_dir) -> list[Path]:
    """Write ``raw.csv``, ``summary.json`` and one boxplot-ready CSV per metric.

    Plot files ``plot_<metric>.csv`` have columns
    ``setting,method,component,replication,value``.
    """
    import csv

    from dmfpca.fdata import fmt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "raw.csv", out / "summary.json"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_COLUMNS)
        for r in result.rows:
            w.writerow([r.setting, r.method, r.replication, r.metric, "" if r.component is None else r.component,
                        fmt(r.value)])
    summary = result.summary()
    summary["failure_details"] = [f.__dict__ for f in result.failures]
    paths[1].write_text(json.dumps(summary, indent=2))
    for metric in ("RE", "ISE", "RMISE"):
        path = out / f"plot_{metric}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("setting", "method", "component", "replication", "value"))
            for r in result.rows:
                if r.metric == metric:
                    w.writerow([r.setting, r.method, "" if r.component is None else r.component, r.replication,
                                fmt(r.value)])
        paths.append(path)
    return paths
