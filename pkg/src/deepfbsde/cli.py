"""Command line: ``deepfbsde {check,train,study,riccati}``.

Exit codes: 0 success, 1 tool error, 2 the method diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config, parse_config

OUT_ENV = "DEEPFBSDE_OUT"
EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2

log = logging.getLogger("deepfbsde")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    common.add_argument("--problem", choices=["example1", "example1_reformulated", "lq_dp", "lq_smp"])
    common.add_argument("--T", type=float, help="time horizon")
    common.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV}/<command>-<problem>)")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--N", type=_int_list, help="time steps, comma separated for studies")
    training.add_argument("--seed", type=int)
    training.add_argument("--iters", type=int, help="SGD iterations K")
    training.add_argument("--batch", type=int, help="batch size M")
    training.add_argument("--precision", choices=["f32", "f64"])

    parser = argparse.ArgumentParser(prog="deepfbsde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check", parents=[common], help="sufficient-condition report and lambda1 sweep")
    sub.add_parser("train", parents=[common, training], help="train at one N, write checkpoint and loss log")
    study = sub.add_parser("study", parents=[common, training], help="convergence study over several N")
    study.add_argument("--runs", type=int)
    study.add_argument("--parallel-runs", type=int, dest="parallel_runs")
    ric = sub.add_parser("riccati", parents=[common], help="dump the Riccati mesh for an LQ problem")
    ric.add_argument("--steps", type=int, default=10_000)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = json.loads(dump_config(load_config(args.config))) if args.config else {}
    overrides = {
        "problem": args.problem,
        "T": args.T,
        "N": getattr(args, "N", None),
        "seed": getattr(args, "seed", None),
        "runs": getattr(args, "runs", None),
        "precision": getattr(args, "precision", None),
        "parallel_runs": getattr(args, "parallel_runs", None),
        "out": str(args.out) if args.out else None,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    for key, flag in (("iterations", "iters"), ("batch", "batch")):
        value = getattr(args, flag, None)
        if value is not None:
            data.setdefault("train", {})[key] = value
    if "problem" not in data:
        raise ConfigError([("problem", "required (use --problem or a config file)")])
    return parse_config(data)


def output_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{cfg.problem}"


def cmd_check(cfg: RunConfig, out: Path) -> int:
    from .conditions import feasibility_search, lambda1_sweep, write_sweep_csv
    from .harness import CONDITIONS_COLUMNS, conditions_rows, write_csv
    from .problems import DEFAULT_T, lipschitz_constants, problem_dims

    T = cfg.T if cfg.T is not None else DEFAULT_T[cfg.problem]
    params = cfg.problem_params()
    m = problem_dims(cfg.problem, params)[1]
    bundle = lipschitz_constants(cfg.problem, params)
    report = feasibility_search(bundle, m, T, cfg.search_config())
    out.mkdir(parents=True, exist_ok=True)
    doc = {"problem": cfg.problem, "T": T, "m": m, "lipschitz": bundle.as_dict(), **report.as_json()}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_sweep_csv(lambda1_sweep(bundle, m, T, report.best_lambda, cfg.search_config()), out / "lambda1_sweep.csv")
    write_csv(out / "conditions.csv", CONDITIONS_COLUMNS, conditions_rows(cfg.problem, T, m, report))
    print(json.dumps({k: doc[k] for k in ("problem", "T", "b_lower", "feasible", "best_B", "best_A", "best_lambda")}))
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .harness import write_csv
    from .neural import save_checkpoint
    from .problems import make_problem
    from .sde import TimeGrid
    from .solver import evaluate, train

    if len(cfg.N) != 1:
        raise ConfigError([("N", "train takes a single N; use `study` for several")])
    N = cfg.N[0]
    problem = make_problem(cfg.problem, cfg.problem_params(), cfg.T)
    result = train(problem, cfg.training(N))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(
        out / "loss.csv",
        ["iteration", "loss", "lr"],
        [[k, v, lr] for k, (v, lr) in enumerate(zip(result.losses, result.learning_rates))],
    )
    meta = {"problem": cfg.problem, "N": N, "T": problem.T, "config_hash": config_hash(cfg), "version": __version__}
    save_checkpoint(out / "checkpoint.json", result.nets.flat(), cfg.seed, meta)
    summary = {"problem": cfg.problem, "N": N, "final_loss": result.final_loss, "diverged": result.diverged}
    diverged = result.diverged
    if problem.has_fields and not result.diverged:
        ev = cfg.evaluation()
        report = evaluate(problem, result.nets, TimeGrid(problem.T, N), ev.paths, ev.seed, fine_steps=ev.fine_steps)
        report.train_loss, report.train_diverged, report.seed = result.final_loss, result.diverged, cfg.seed
        (out / "report.json").write_text(json.dumps(_finite(report.as_dict()), indent=2, sort_keys=True) + "\n")
        summary.update(total=report.total, diverged_fraction=report.diverged_fraction)
        diverged = report.verdict_diverged
    summary["diverged"] = diverged
    print(json.dumps(_finite(summary)))
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_study(cfg: RunConfig, out: Path) -> int:
    from .harness import emit_results, run_study

    result = run_study(cfg)
    emit_results(result, out)
    s = result.study
    for row in s.rows:
        print(f"N={row.N:4d}  total={row.total_mean:.3e} ({row.total_std:.1e})  diverged={row.diverged_frac:.2f}")
    print(f"rate(total) = {s.rates.get('total', float('nan')):.3f}  non_converged={s.non_converged}")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_riccati(cfg: RunConfig, out: Path, steps: int) -> int:
    from .problems import DEFAULT_T
    from .riccati import solve_riccati, write_mesh_csv

    if not cfg.problem.startswith("lq"):
        raise ConfigError([("problem", "riccati needs lq_dp or lq_smp")])
    T = cfg.T if cfg.T is not None else DEFAULT_T[cfg.problem]
    sol = solve_riccati(cfg.problem_params(), T, steps)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh_csv(sol, out / "riccati.csv")
    print(json.dumps({"problem": cfg.problem, "T": T, "steps": steps, "c0": float(sol.c[0])}))
    return EXIT_OK


def _finite(d: dict) -> dict:
    return {k: None if isinstance(v, float) and not math.isfinite(v) else v for k, v in d.items()}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = output_dir(cfg, args.command)
        if args.command == "check":
            return cmd_check(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "study":
            return cmd_study(cfg, out)
        return cmd_riccati(cfg, out, args.steps)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
