"""Sufficient-condition checker: limit constants, B-bar/A-bar, the closed-form lower bound and a lambda search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .problems import LipschitzBundle

SERIES_CUTOFF = 1e-6
LAMBDA3_INF = 1e12  # finite stand-ins for the limits lambda3 -> inf, lambda4 -> 0
LAMBDA4_ZERO = 1e-12
REFINE_MARGIN = 6.0  # decades the simplex may move past the grid


@dataclass(frozen=True)
class LambdaQuad:
    l1: float
    l2: float
    l3: float
    l4: float

    def check(self, bundle: LipschitzBundle, m: int) -> None:
        problems = []
        if not self.l1 > 0:
            problems.append(f"lambda1={self.l1} must be > 0")
        if not self.l2 > bundle.Lf_z:
            problems.append(f"lambda2={self.l2} must be > Lf_z={bundle.Lf_z}")
        if not self.l3 > 2 * m * bundle.Lf_z:
            problems.append(f"lambda3={self.l3} must be > 2*m*Lf_z={2 * m * bundle.Lf_z}")
        if not self.l4 > 0:
            problems.append(f"lambda4={self.l4} must be > 0")
        if problems:
            raise ValueError("; ".join(problems))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l1, self.l2, self.l3, self.l4)


@dataclass(frozen=True)
class LimitConstants:
    K1: float
    K2: float
    K3: float
    K4: float
    C1: float
    C2: float
    C3: float
    C4: float


def _constants(b: LipschitzBundle, m: int, l1, l2, l3):
    K1 = 2 * b.kb + l1 + b.Ls_x
    K2 = b.Lb_y / l1 + b.Ls_y
    K3 = 2 * b.kf + l2
    K4 = b.Lf_x / l2
    C1 = b.Lb_z / l1
    C2 = 2 * (b.Lf_y / l3 + l3)
    C3 = 2 / l3
    C4 = m / (1 - 2 * m * b.Lf_z / l3)
    return K1, K2, K3, K4, C1, C2, C3, C4


def limit_constants(bundle: LipschitzBundle, lam: LambdaQuad, m: int, T: float | None = None) -> LimitConstants:
    lam.check(bundle, m)
    return LimitConstants(*(float(v) for v in _constants(bundle, m, lam.l1, lam.l2, lam.l3)))


def phi(a, T: float):
    """(exp(aT) - 1) / a, with the removable singularity at a = 0 handled by series."""
    a = np.asarray(a, dtype=float)
    aT = a * T
    small = np.abs(aT) < SERIES_CUTOFF
    with np.errstate(all="ignore"):
        direct = np.expm1(aT) / np.where(small, 1.0, a)
    series = T * (1 + aT / 2 + aT * aT / 6)
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


def psi(a, T: float):
    """(1 - exp(-aT)) / a, series branch near a = 0."""
    a = np.asarray(a, dtype=float)
    aT = a * T
    small = np.abs(aT) < SERIES_CUTOFF
    with np.errstate(all="ignore"):
        direct = -np.expm1(-aT) / np.where(small, 1.0, a)
    series = T * (1 - aT / 2 + aT * aT / 6)
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


def ab_bar_arrays(bundle: LipschitzBundle, m: int, T: float, l1, l2, l3, l4):
    """Vectorized (B-bar, A-bar) over broadcastable lambda arrays; no domain check.

    A-bar is +inf wherever B-bar >= 1 (or anything is non-finite).
    """
    b = bundle
    l1, l2, l3, l4 = (np.asarray(v, dtype=float) for v in (l1, l2, l3, l4))
    K1, K2, K3, K4, C1, C2, C3, C4 = _constants(b, m, l1, l2, l3)
    with np.errstate(all="ignore"):
        shift = np.exp(np.maximum(-K1 * T, 0.0))
        coupling = shift * C1 * C4
        B = coupling * (b.Lf_x * C3 * phi(K1, T) + b.Lg_x * (1 + l4) * np.exp(K1 * T))
        B = np.where(C1 == 0, 0.0, B)  # 0 * inf guards for huge lambda
        left = b.Lg_x * (1 + l4) * np.exp((K1 + K3) * T) + K4 * phi(K1 + K3, T)
        right = K2 * psi(K1 + K3, T) + coupling * C2 * psi(K3, T)
        right = np.where(C1 == 0, K2 * psi(K1 + K3, T), right)
        A = left * right / (1 - B)
    A = np.where((B < 1) & np.isfinite(A), A, np.inf)
    B = np.where(np.isnan(B), np.inf, B)
    return B, A


def ab_bar(bundle: LipschitzBundle, lam: LambdaQuad, m: int, T: float) -> tuple[float, float]:
    lam.check(bundle, m)
    B, A = ab_bar_arrays(bundle, m, T, *lam.as_tuple())
    return float(B), float(A)


@dataclass(frozen=True)
class LowerBound:
    value: float
    l1: float  # arg-inf; lambda3 = +inf and lambda4 = 0 at the infimum
    branch: int

    @property
    def arg_inf(self) -> dict:
        return {"lambda1": self.l1, "lambda3": math.inf, "lambda4": 0.0}


def b_lower_bound(bundle: LipschitzBundle, m: int, T: float) -> LowerBound:
    """Infimum of B-bar over the lambda domain.

    Branch 1 is the stationary point lambda1 = 1/T, usable when it lies in the
    region where K1 >= 0; branch 2 sits at the kink lambda1 = -(2 kb + Ls_x).
    The smaller of the admissible candidates is returned.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    scale = m * bundle.Lb_z * bundle.Lg_x
    kink = -(2 * bundle.kb + bundle.Ls_x)
    candidates = []
    if 1.0 / T >= max(kink, 0.0):
        # at lambda3 = inf, lambda4 = 0: B-bar = scale * exp(K1 T) / lambda1, stationary at 1/T
        with np.errstate(over="ignore"):
            value = scale * float(np.exp((1.0 / T - kink) * T)) * T
        candidates.append((value, 1.0 / T, 1))
    if kink > 0:
        candidates.append((scale / kink, kink, 2))
    value, arg, branch = min(candidates, key=lambda v: v[0])
    return LowerBound(float(value), float(arg), branch)


@dataclass
class SearchConfig:
    exponent_low: float = -6.0
    exponent_high: float = 6.0
    points_per_axis: int = 13
    max_refine_evals: int = 500
    sweep_points: int = 121

    def __post_init__(self):
        if self.points_per_axis < 2 or self.max_refine_evals < 0 or self.sweep_points < 2:
            raise ValueError("search budget must be positive")
        if not self.exponent_low < self.exponent_high:
            raise ValueError("exponent range is empty")


@dataclass
class ConditionReport:
    b_lower: float
    arg_inf: dict
    branch: int
    feasible: bool
    best_lambda: LambdaQuad
    best_B: float
    best_A: float
    short_circuit: bool
    trace: dict = field(default_factory=dict)

    @property
    def best_max(self) -> float:
        return max(self.best_B, self.best_A)

    def as_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean(
            {
                "b_lower": self.b_lower,
                "arg_inf": dict(self.arg_inf),
                "branch": self.branch,
                "feasible": self.feasible,
                "short_circuit": self.short_circuit,
                "best_lambda": dict(zip(("lambda1", "lambda2", "lambda3", "lambda4"), self.best_lambda.as_tuple())),
                "best_B": self.best_B,
                "best_A": self.best_A,
                "best_max": self.best_max,
                "trace": dict(self.trace),
            }
        )


def _from_exponents(bundle: LipschitzBundle, m: int, e):
    e = np.asarray(e, dtype=float)
    return (
        10.0 ** e[..., 0],
        bundle.Lf_z + 10.0 ** e[..., 1],
        2 * m * bundle.Lf_z + 10.0 ** e[..., 2],
        10.0 ** e[..., 3],
    )


def feasibility_search(bundle: LipschitzBundle, m: int, T: float, config: SearchConfig | None = None) -> ConditionReport:
    """Minimize max(B-bar, A-bar) over the lambda domain.

    Lambdas are searched through log10 offsets from the domain boundaries, so
    every candidate is admissible: coarse grid first, then Nelder-Mead from the
    best grid point.
    """
    config = config or SearchConfig()
    lb = b_lower_bound(bundle, m, T)
    if lb.value >= 1:
        lam = LambdaQuad(lb.l1, bundle.Lf_z + 1.0, 2 * m * bundle.Lf_z + LAMBDA3_INF, LAMBDA4_ZERO)
        B, A = ab_bar_arrays(bundle, m, T, *lam.as_tuple())
        return ConditionReport(
            b_lower=lb.value,
            arg_inf=lb.arg_inf,
            branch=lb.branch,
            feasible=False,
            best_lambda=lam,
            best_B=float(B),
            best_A=float(A),
            short_circuit=True,
            trace={"grid_evals": 0, "refine_evals": 0, "reason": "b_lower >= 1"},
        )

    axis = np.linspace(config.exponent_low, config.exponent_high, config.points_per_axis)
    grid = np.stack(np.meshgrid(axis, axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 4)
    B, A = ab_bar_arrays(bundle, m, T, *_from_exponents(bundle, m, grid))
    objective = np.maximum(B, A)
    k = int(np.argmin(objective))
    grid_best = float(objective[k])

    def f(e):
        b, a = ab_bar_arrays(bundle, m, T, *_from_exponents(bundle, m, e))
        v = float(max(b, a))
        return v if math.isfinite(v) else 1e300

    start = grid[k]
    best_e, best_v, nfev = start, grid_best, 0
    if config.max_refine_evals > 0:
        res = minimize(
            f,
            start,
            method="Nelder-Mead",
            bounds=[(config.exponent_low - REFINE_MARGIN, config.exponent_high + REFINE_MARGIN)] * 4,
            options={"maxfev": config.max_refine_evals, "xatol": 1e-8, "fatol": 1e-12},
        )
        nfev = int(res.nfev)
        if res.fun < best_v:
            best_e, best_v = res.x, float(res.fun)
    lam = LambdaQuad(*(float(v) for v in _from_exponents(bundle, m, best_e)))
    B, A = ab_bar_arrays(bundle, m, T, *lam.as_tuple())
    B, A = float(B), float(A)
    return ConditionReport(
        b_lower=lb.value,
        arg_inf=lb.arg_inf,
        branch=lb.branch,
        feasible=max(B, A) < 1,
        best_lambda=lam,
        best_B=B,
        best_A=A,
        short_circuit=False,
        trace={"grid_evals": int(grid.shape[0]), "grid_best": grid_best, "refine_evals": nfev},
    )


def lambda1_sweep(bundle: LipschitzBundle, m: int, T: float, fixed: LambdaQuad, config: SearchConfig | None = None) -> np.ndarray:
    """Rows (lambda1, B-bar, A-bar) over a log grid of lambda1 with the other lambdas held at ``fixed``."""
    config = config or SearchConfig()
    l1 = np.logspace(config.exponent_low, config.exponent_high, config.sweep_points)
    B, A = ab_bar_arrays(bundle, m, T, l1, fixed.l2, fixed.l3, fixed.l4)
    return np.column_stack([l1, B, A])


def write_sweep_csv(rows: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda1", "B_bar", "A_bar"])
        for l1, b, a in rows:
            w.writerow([repr(float(l1)), repr(float(b)), repr(float(a))])


def check_problem(name: str, params=None, T: float | None = None, config: SearchConfig | None = None) -> tuple[ConditionReport, np.ndarray]:
    """Feasibility report plus lambda1 sweep for one of the built-in problems."""
    from .problems import DEFAULT_T, default_params, lipschitz_constants, problem_dims

    params = params if params is not None else default_params(name)
    T = DEFAULT_T[name] if T is None else T
    bundle = lipschitz_constants(name, params)
    m = problem_dims(name, params)[1]
    report = feasibility_search(bundle, m, T, config)
    return report, lambda1_sweep(bundle, m, T, report.best_lambda, config)

