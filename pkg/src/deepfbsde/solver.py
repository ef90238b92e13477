"""Deep BSDE training over the unrolled scheme, error evaluation and convergence studies."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .neural import AdamState, MlpSpec, adam_step, mlp_apply, mlp_init
from .sde import ReferenceBatch, TimeGrid, TrajectoryBatch, euler_rollout, reference_rollout

log = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 256


@dataclass
class NetworkStack:
    """Y0 network (d -> q) and one Z network (d -> q*m) per time step."""

    y0_params: dict
    z_params: list
    q: int
    m: int

    @classmethod
    def init(cls, problem, N: int, seed: int, dtype=np.float64) -> NetworkStack:
        children = np.random.SeedSequence(seed).spawn(N + 1)
        y0 = mlp_init(MlpSpec(problem.d, problem.q), np.random.default_rng(children[0]), dtype)
        zs = [
            mlp_init(MlpSpec(problem.d, problem.q * problem.m), np.random.default_rng(c), dtype)
            for c in children[1:]
        ]
        return cls(y0, zs, problem.q, problem.m)

    @property
    def N(self) -> int:
        return len(self.z_params)

    def y0(self, x):
        x = ad.value_of(x)
        out = mlp_apply(self.y0_params, x[:1])
        return ad.broadcast_to(out, (x.shape[0], self.q))

    def z(self, i: int, t: float, x):
        return ad.reshape(mlp_apply(self.z_params[i], x), (-1, self.q, self.m))

    def flat(self) -> dict[str, np.ndarray]:
        out = {f"y0.{k}": v for k, v in self.y0_params.items()}
        for i, p in enumerate(self.z_params):
            out.update({f"z{i}.{k}": v for k, v in p.items()})
        return out

    @classmethod
    def from_flat(cls, flat: dict, q: int, m: int) -> NetworkStack:
        y0 = {k[3:]: v for k, v in flat.items() if k.startswith("y0.")}
        n = 1 + max((int(k[1:].split(".")[0]) for k in flat if k.startswith("z")), default=-1)
        zs = [{k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(f"z{i}.")} for i in range(n)]
        return cls(y0, zs, q, m)

    def on_tape(self, tape: ad.Tape) -> NetworkStack:
        flat = {name: tape.param(name, value) for name, value in self.flat().items()}
        return NetworkStack.from_flat(flat, self.q, self.m)


@dataclass
class TrainingConfig:
    N: int
    batch: int = 2**9
    iterations: int = 2**12
    seed: int = 0
    precision: str = "f64"
    lr0: float = 1e-2
    decay: float = 1e-2
    decay_horizon: int | None = None  # defaults to iterations

    def __post_init__(self):
        for name in ("N", "batch", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if not (self.lr0 > 0 and self.decay > 0):
            raise ValueError("learning-rate schedule values must be positive")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class TrainResult:
    nets: NetworkStack
    losses: list
    learning_rates: list
    diverged_iterations: list
    diverged: bool
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        finite = [v for v in self.losses[-32:] if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.nan


def loss(traj: TrajectoryBatch, problem):
    """Mean squared terminal mismatch over non-diverged paths (NaN if none survive)."""
    x_n, y_n = traj.xs[-1], traj.ys[-1]
    alive = ~traj.diverged
    if not alive.any():
        return math.nan
    if not alive.all():
        rows = np.flatnonzero(alive)
        x_n, y_n = ad.take_rows(x_n, rows), ad.take_rows(y_n, rows)
    per_path = ad.sqnorm(problem.terminal(x_n) - y_n, axis=1)
    return ad.sum(per_path) / float(per_path.shape[0])


def _taped_loss(problem, nets: NetworkStack, grid: TimeGrid, dW: np.ndarray, dtype):
    tape = ad.Tape(dtype)
    traj = euler_rollout(problem, nets.on_tape(tape), grid, dW)
    bad = traj.diverged
    if bad.any() and not bad.all():
        # rows are independent: re-record on the survivors so no NaN reaches the adjoints
        tape.release()
        tape = ad.Tape(dtype)
        traj = euler_rollout(problem, nets.on_tape(tape), grid, dW[~bad])
    value = loss(traj, problem)
    return tape, value, bad


def train(problem, config: TrainingConfig, nets: NetworkStack | None = None, callback: Callable | None = None) -> TrainResult:
    """Adam on the empirical terminal loss with fresh Brownian noise every iteration."""
    started = time.perf_counter()
    grid = TimeGrid(problem.T, config.N)
    dtype = config.dtype
    nets = nets or NetworkStack.init(problem, config.N, config.seed, dtype)
    params = nets.flat()
    state = AdamState(
        horizon=config.decay_horizon or config.iterations, lr0=config.lr0, decay=config.decay
    )
    noise = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 1])))
    sqrt_h = math.sqrt(grid.h)
    losses, rates, flags = [], [], []
    diverged = False
    for k in range(config.iterations):
        dW = (noise.standard_normal((config.batch, config.N, problem.m)) * sqrt_h).astype(dtype)
        tape, value, bad = _taped_loss(problem, nets, grid, dW, dtype)
        lr = state.learning_rate()
        if isinstance(value, ad.Var):
            grads = ad.backward_grad(tape, value)
            applied = adam_step(state, params, grads)
            loss_value = float(value.value)
        else:
            applied, loss_value = False, math.nan
        tape.release()
        if not applied:
            state.k += 1  # the schedule keeps moving on skipped steps
        flags.append(bool(bad.any()) or not applied or not math.isfinite(loss_value))
        losses.append(loss_value)
        rates.append(lr)
        if callback is not None:
            callback(k, loss_value, lr)
        window = flags[-DIVERGENCE_WINDOW:]
        if len(window) == DIVERGENCE_WINDOW and sum(window) > DIVERGENCE_WINDOW // 2:
            diverged = True
            log.info("persistent divergence at iteration %d; stopping", k)
            break
    if not diverged and len(flags) < DIVERGENCE_WINDOW and sum(flags) > len(flags) // 2:
        diverged = True
    return TrainResult(
        nets=nets,
        losses=losses,
        learning_rates=rates,
        diverged_iterations=flags,
        diverged=diverged,
        seconds=time.perf_counter() - started,
    )


@dataclass
class ErrorReport:
    N: int
    h: float
    err_x: float
    err_y: float
    err_z: float
    total: float
    rel_x: float
    rel_y: float
    rel_z: float
    rel_total: float
    loss: float
    diverged_fraction: float
    loss_dominated: bool
    train_loss: float = math.nan
    train_diverged: bool = False
    seed: int | None = None

    @property
    def verdict_diverged(self) -> bool:
        return self.train_diverged or self.diverged_fraction > 0.1 or not math.isfinite(self.total)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(
    problem,
    nets,
    grid: TimeGrid,
    paths: int = 2**12,
    seed: int = 2**31 - 1,
    refinement: int | None = None,
    fine_steps: int = 10_000,
    reference: ReferenceBatch | None = None,
) -> ErrorReport:
    """Pathwise squared errors against a reference driven by the same noise."""
    if reference is None:
        if not problem.has_fields:
            raise ValueError(f"problem {problem.name!r} has no reference solution")
        if refinement is None:
            if fine_steps % grid.N:
                raise ValueError(f"fine_steps={fine_steps} is not a multiple of N={grid.N}")
            refinement = fine_steps // grid.N
        reference = reference_rollout(problem, grid, paths, seed, refinement)
    traj = euler_rollout(problem, nets, grid, reference.dW)
    X, Y, Z = traj.X, traj.Y, traj.Z
    bad = traj.diverged | reference.diverged
    alive = ~bad
    if not alive.any():
        nan = math.nan
        return ErrorReport(grid.N, grid.h, nan, nan, nan, nan, nan, nan, nan, nan, nan, 1.0, False)
    with np.errstate(all="ignore"):
        ex = ((X - reference.X) ** 2).sum(-1)[alive].mean(0)
        ey = ((Y - reference.Y) ** 2).sum(-1)[alive].mean(0)
        ez = ((Z - reference.Z) ** 2).sum(-1)[alive].mean(0)
        nx, ny = int(np.argmax(ex)), int(np.argmax(ey))
        err_x, err_y, err_z = float(ex[nx]), float(ey[ny]), float(ez.mean())
        ref_x = float((reference.X[:, nx] ** 2).sum(-1)[alive].mean())
        ref_y = float((reference.Y[:, ny] ** 2).sum(-1)[alive].mean())
        ref_z = float((reference.Z**2).sum(-1)[alive].mean())
        mismatch = ((problem.terminal(X[:, -1]) - Y[:, -1]) ** 2).sum(-1)[alive].mean()
    total = err_x + err_y + err_z
    return ErrorReport(
        N=grid.N,
        h=grid.h,
        err_x=err_x,
        err_y=err_y,
        err_z=err_z,
        total=total,
        rel_x=_safe_div(err_x, ref_x),
        rel_y=_safe_div(err_y, ref_y),
        rel_z=_safe_div(err_z, ref_z),
        rel_total=_safe_div(total, ref_x + ref_y + ref_z),
        loss=float(mismatch),
        diverged_fraction=float(bad.mean()),
        loss_dominated=bool(mismatch > grid.h),
    )


def _safe_div(a: float, b: float) -> float:
    return a / b if b > 0 else math.nan


def coarsen_reference(ref: ReferenceBatch, factor: int) -> ReferenceBatch:
    """Reference on a grid with ``factor`` times fewer steps (nodes subsampled, increments summed)."""
    if factor == 1:
        return ref
    B, n_steps, m = ref.dW.shape
    if n_steps % factor:
        raise ValueError(f"{n_steps} steps cannot be coarsened by {factor}")
    return ReferenceBatch(
        X=ref.X[:, ::factor],
        Y=ref.Y[:, ::factor],
        Z=ref.Z[:, ::factor],
        dW=ref.dW.reshape(B, n_steps // factor, factor, m).sum(axis=2),
        refinement=ref.refinement * factor,
        diverged=ref.diverged,
    )


def fit_rate(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    hs, errors = np.asarray(hs, float), np.asarray(errors, float)
    ok = np.isfinite(errors) & (errors > 0)
    if ok.sum() < 2:
        return math.nan
    slope, _ = np.polyfit(np.log(hs[ok]), np.log(errors[ok]), 1)
    return float(slope)


@dataclass
class EvalConfig:
    paths: int = 2**12
    fine_steps: int = 10_000
    seed: int = 2**31 - 1

    def __post_init__(self):
        if self.paths < 1 or self.fine_steps < 1:
            raise ValueError("paths and fine_steps must be positive")


@dataclass
class StudyRow:
    N: int
    h: float
    err_x_mean: float
    err_x_std: float
    err_y_mean: float
    err_y_std: float
    err_z_mean: float
    err_z_std: float
    total_mean: float
    total_std: float
    loss_mean: float
    diverged_frac: float


@dataclass
class Study:
    problem: str
    N_list: list
    runs: list = field(default_factory=list)  # ErrorReport per (N, seed)
    rows: list = field(default_factory=list)  # StudyRow per N
    rates: dict = field(default_factory=dict)

    @property
    def non_converged(self) -> bool:
        if not self.rows:
            return False
        first, last = self.rows[0], self.rows[-1]
        if any(r.diverged_frac > 0.1 for r in self.rows):
            return True
        return not (last.total_mean <= 0.5 * first.total_mean)

    @property
    def any_diverged(self) -> bool:
        return any(r.verdict_diverged for r in self.runs)


def aggregate(reports: Sequence[ErrorReport]) -> StudyRow:
    def ms(name):
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        return float(np.mean(vals)), float(np.std(vals))

    ex, ey, ez, tot = ms("err_x"), ms("err_y"), ms("err_z"), ms("total")
    return StudyRow(
        N=reports[0].N,
        h=reports[0].h,
        err_x_mean=ex[0],
        err_x_std=ex[1],
        err_y_mean=ey[0],
        err_y_std=ey[1],
        err_z_mean=ez[0],
        err_z_std=ez[1],
        total_mean=tot[0],
        total_std=tot[1],
        loss_mean=ms("loss")[0],
        diverged_frac=float(np.mean([r.diverged_fraction for r in reports])),
    )


def run_one(problem, N: int, seed: int, train_config: TrainingConfig, eval_config: EvalConfig, reference=None) -> ErrorReport:
    cfg = TrainingConfig(**{**asdict(train_config), "N": N, "seed": seed})
    result = train(problem, cfg)
    report = evaluate(
        problem,
        result.nets,
        TimeGrid(problem.T, N),
        paths=eval_config.paths,
        seed=eval_config.seed,
        fine_steps=eval_config.fine_steps,
        reference=reference,
    )
    report.train_loss = result.final_loss
    report.train_diverged = result.diverged
    report.seed = seed
    log.info("N=%d seed=%d total=%.3e loss=%.3e (%.0fs)", N, seed, report.total, report.loss, result.seconds)
    return report


def convergence_study(
    problem,
    N_list: Sequence[int],
    runs: int,
    train_config: TrainingConfig,
    eval_config: EvalConfig | None = None,
    seeds: Sequence[int] | None = None,
    runner: Callable | None = None,
) -> Study:
    """Train and evaluate every (N, seed) pair; one shared reference for all of them.

    ``runner`` maps a list of zero-argument jobs to their results; the default
    runs them sequentially.
    """
    eval_config = eval_config or EvalConfig()
    N_list = [int(n) for n in N_list]
    if N_list != sorted(N_list) or len(set(N_list)) != len(N_list):
        raise ValueError("N list must be strictly ascending")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    seeds = list(seeds) if seeds is not None else [train_config.seed + j for j in range(runs)]
    base_N = math.lcm(*N_list)
    if eval_config.fine_steps % base_N:
        raise ValueError(f"fine_steps={eval_config.fine_steps} must be a multiple of lcm(N)={base_N}")
    base_grid = TimeGrid(problem.T, base_N)
    ref = reference_rollout(
        problem, base_grid, eval_config.paths, eval_config.seed, eval_config.fine_steps // base_N
    )
    refs = {N: coarsen_reference(ref, base_N // N) for N in N_list}
    jobs = [(N, s) for N in N_list for s in seeds]
    if runner is None:
        reports = [run_one(problem, N, s, train_config, eval_config, refs[N]) for N, s in jobs]
    else:
        reports = runner(problem, jobs, train_config, eval_config, refs)
    study = Study(problem=problem.name, N_list=N_list, runs=reports)
    for N in N_list:
        study.rows.append(aggregate([r for r in reports if r.N == N]))
    hs = [r.h for r in study.rows]
    for key in ("err_x", "err_y", "err_z", "total"):
        study.rates[key] = fit_rate(hs, [getattr(r, f"{key}_mean") for r in study.rows])
    return study
