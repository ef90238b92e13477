"""Experiment orchestration and result files."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conditions import ConditionReport, feasibility_search
from .config import RunConfig, config_hash
from .problems import lipschitz_constants, make_problem
from .solver import Study, convergence_study, run_one

CONVERGENCE_COLUMNS = [
    "N",
    "h",
    "err_x_mean",
    "err_x_std",
    "err_y_mean",
    "err_y_std",
    "err_z_mean",
    "err_z_std",
    "total_mean",
    "total_std",
    "loss_mean",
    "diverged_frac",
]
LOGLOG_COLUMNS = ["log10_h", "log10_total_mean"]
CONDITIONS_COLUMNS = [
    "problem",
    "T",
    "m",
    "b_lower",
    "branch",
    "feasible",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "B_bar",
    "A_bar",
]
RUNS_COLUMNS = [
    "N",
    "seed",
    "err_x",
    "err_y",
    "err_z",
    "total",
    "rel_total",
    "loss",
    "train_loss",
    "diverged_fraction",
    "train_diverged",
    "loss_dominated",
]


@dataclass
class StudyResult:
    study: Study
    conditions: ConditionReport | None
    provenance: dict
    condition_note: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return self.study.any_diverged or any(r.diverged_frac > 0.1 for r in self.study.rows)

    def as_json(self) -> dict:
        s = self.study
        return _clean(
            {
                "problem": s.problem,
                "N": list(s.N_list),
                "runs": [r.as_dict() for r in s.runs],
                "aggregate": [asdict(r) for r in s.rows],
                "rates": dict(s.rates),
                "verdict": {
                    "non_converged": s.non_converged,
                    "diverged": self.diverged,
                },
                "conditions": self.conditions.as_json() if self.conditions else None,
                "conditions_note": self.condition_note,
                "provenance": dict(self.provenance),
                **self.extra,
            }
        )


def _clean(v):
    """Non-finite floats become null so the JSON stays standard."""
    if isinstance(v, float):
        return v if math.isfinite(v) else None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path: Path, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def provenance(cfg: RunConfig) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "seeds": cfg.run_seeds(),
        "eval_seed": cfg.eval.seed,
        "version": __version__,
        "config": cfg.model_dump(mode="json", exclude={"out", "parallel_runs"}),
    }


def condition_report(cfg: RunConfig, m: int, T: float) -> tuple[ConditionReport | None, str | None]:
    try:
        bundle = lipschitz_constants(cfg.problem, cfg.problem_params())
    except ValueError as exc:
        return None, str(exc)
    return feasibility_search(bundle, m, T, cfg.search_config()), None


def _job(args):
    name, params, T, N, seed, train_config, eval_config, ref = args
    problem = make_problem(name, params, T)
    return run_one(problem, N, seed, train_config, eval_config, ref)


def process_runner(workers: int):
    """Runner for :func:`convergence_study` that trains seeds in separate processes."""

    def run(problem, jobs, train_config, eval_config, refs):
        payload = [
            (problem.name, problem.params, problem.T, N, seed, train_config, eval_config, refs[N]) for N, seed in jobs
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_job, payload))

    return run


def run_study(cfg: RunConfig) -> StudyResult:
    problem = make_problem(cfg.problem, cfg.problem_params(), cfg.T)
    runner = process_runner(cfg.parallel_runs) if cfg.parallel_runs > 1 else None
    study = convergence_study(
        problem,
        cfg.N,
        runs=len(cfg.run_seeds()),
        train_config=cfg.training(cfg.N[0]),
        eval_config=cfg.evaluation(),
        seeds=cfg.run_seeds(),
        runner=runner,
    )
    report, note = condition_report(cfg, problem.m, problem.T)
    return StudyResult(
        study=study,
        conditions=report,
        provenance=provenance(cfg),
        condition_note=note,
        extra={"T": problem.T, "m": problem.m},
    )


def conditions_rows(problem: str, T: float, m: int, report: ConditionReport | None) -> list[list]:
    if report is None:
        return []
    lam = report.best_lambda
    return [[problem, T, m, report.b_lower, report.branch, report.feasible, lam.l1, lam.l2, lam.l3, lam.l4, report.best_B, report.best_A]]


def emit_results(result: StudyResult, out_dir: str | Path) -> list[Path]:
    """Write study.json, convergence.csv, loglog.csv, conditions.csv and runs.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = result.study
    paths = [out / name for name in ("study.json", "convergence.csv", "loglog.csv", "conditions.csv", "runs.csv")]
    paths[0].write_text(json.dumps(result.as_json(), indent=2, sort_keys=True) + "\n")
    write_csv(paths[1], CONVERGENCE_COLUMNS, [[getattr(r, c) for c in CONVERGENCE_COLUMNS] for r in s.rows])
    loglog = []
    for r in s.rows:
        with np.errstate(all="ignore"):
            loglog.append([float(np.log10(r.h)), float(np.log10(r.total_mean)) if r.total_mean > 0 else math.nan])
    write_csv(paths[2], LOGLOG_COLUMNS, loglog)
    T, m = result.extra.get("T"), result.extra.get("m")
    write_csv(paths[3], CONDITIONS_COLUMNS, conditions_rows(s.problem, T, m, result.conditions))
    write_csv(paths[4], RUNS_COLUMNS, [[getattr(r, c) for c in RUNS_COLUMNS] for r in s.runs])
    return paths
