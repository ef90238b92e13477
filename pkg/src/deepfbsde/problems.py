"""Coupled FBSDE problems, their Lipschitz constants and the benchmark instances.

Batched conventions used by every coefficient function::

    t: float, x: (B, d), y: (B, q), z: (B, q, m)
    drift -> (B, d), diffusion -> (B, d, m) or (d, m), driver -> (B, q), terminal -> (B, q)

All coefficient functions are written with the ops in :mod:`deepfbsde.autodiff`
so they can be evaluated on plain arrays or recorded on a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad

PROBLEM_NAMES = ("example1", "example1_reformulated", "lq_dp", "lq_smp")


@dataclass(frozen=True)
class LipschitzBundle:
    Lb_x: float = 0.0
    Lb_y: float = 0.0
    Lb_z: float = 0.0
    Ls_x: float = 0.0
    Ls_y: float = 0.0
    Lf_x: float = 0.0
    Lf_y: float = 0.0
    Lf_z: float = 0.0
    Lg_x: float = 0.0
    kb: float = 0.0
    kf: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("L") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        # a one-sided constant cannot exceed what the Lipschitz bound already implies
        if self.kb > math.sqrt(self.Lb_x) or self.kf > math.sqrt(self.Lf_y):
            raise ValueError("monotonicity constants must satisfy kb <= sqrt(Lb_x) and kf <= sqrt(Lf_y)")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def scaled(self, **factors: float) -> LipschitzBundle:
        values = self.as_dict()
        for name, s in factors.items():
            values[name] *= s
        return LipschitzBundle(**values)


@dataclass(frozen=True)
class FbsdeProblem:
    name: str
    d: int
    m: int
    q: int
    T: float
    x0: np.ndarray
    drift: Callable
    diffusion: Callable
    driver: Callable
    terminal: Callable
    y_field: Optional[Callable] = None
    z_field: Optional[Callable] = None
    params: object = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        x0 = np.asarray(self.x0, dtype=np.float64)
        if x0.shape != (self.d,):
            raise ValueError(f"x0 must have shape ({self.d},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)

    @property
    def has_fields(self) -> bool:
        return self.y_field is not None and self.z_field is not None


@dataclass(frozen=True)
class Example1Params:
    d: int = 10
    r: float = 1.0
    sigma_bar: float = 0.1
    kappa_y: float = 0.1
    kappa_z: float = 0.01

    def __post_init__(self):
        if not self.sigma_bar > 0:
            raise ValueError("sigma_bar must be positive")
        if self.d < 1:
            raise ValueError("d must be >= 1")


def _lq_preset_diagonals():
    mx = -np.array([1, 2, 3] * 8 + [1], dtype=float)
    mu = np.array([1, 1, 0.5, 1, 0, 0] * 4 + [1], dtype=float)
    mc_base = np.array([-0.2, -0.1, 0, 0, 0.1, 0.2] * 4 + [-0.2], dtype=float)
    sigma = np.array([0.15, 0.15] + [0.25] * 10 + [0.15, 0.15] + [0.25] * 11)
    rx = 2.0 * np.array([25, 1] * 12 + [25], dtype=float)
    g = 2.0 * np.array(
        [25, 25, 25, 25, 25, 25, 1, 25, 1, 25, 1, 25, 25, 25, 25, 25, 25, 25, 1, 25, 1, 25, 1, 25, 1],
        dtype=float,
    )
    return mx, mu, mc_base, sigma, rx, g


@dataclass(frozen=True, eq=False)
class LqParams:
    """Linear-quadratic control data: dX = (Mx X + Mu u) dt + Sigma dW."""

    Mx: np.ndarray
    Mu: np.ndarray
    Mc: np.ndarray
    Sigma: np.ndarray
    Rx: np.ndarray
    Ru: float
    G: np.ndarray
    r_x: float = 1.0
    r_z: float = 10.0

    def __post_init__(self):
        d = np.asarray(self.Mx).shape[0]
        conv = {
            "Mx": (d, d),
            "Mu": (d, 1),
            "Mc": (d,),
            "Sigma": (d, d),
            "Rx": (d, d),
            "G": (d, d),
        }
        for name, shape in conv.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if name == "Mu" and arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if not self.Ru > 0:
            raise ValueError("Ru must be positive")
        if np.linalg.matrix_rank(self.Sigma) < d:
            raise ValueError("Sigma must be invertible")
        for name in ("Rx", "G"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T) or np.linalg.eigvalsh(mat).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")

    @classmethod
    def preset(cls, mu_scale: float = 1.0, r_x: float = 1.0, r_z: float = 10.0) -> LqParams:
        """The 25-dimensional benchmark coefficients; ``mu_scale`` divides Mu."""
        mx, mu, mc_base, sigma, rx, g = _lq_preset_diagonals()
        Mx = np.diag(mx)
        return cls(
            Mx=Mx,
            Mu=(mu / mu_scale)[:, None],
            Mc=-Mx @ mc_base,
            Sigma=np.diag(sigma),
            Rx=np.diag(rx),
            Ru=2.0,
            G=np.diag(g),
            r_x=r_x,
            r_z=r_z,
        )

    @property
    def d(self) -> int:
        return self.Mx.shape[0]

    @cached_property
    def control_gain(self) -> np.ndarray:
        """Mu Ru^{-1} Mu^T."""
        return self.Mu @ self.Mu.T / self.Ru

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.Sigma)


def spectral_norm(a: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on a^T a."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if not np.any(a):
        return 0.0
    ata = a.T @ a
    v = np.ones(ata.shape[0]) + np.linspace(0.0, 1e-3, ata.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = ata @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ ata @ v)
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


# -- Example 1 ----------------------------------------------------------------


def _example1(p: Example1Params, T: float, x0, reformulated: bool) -> FbsdeProblem:
    d, r, sb, ky, kz = p.d, p.r, p.sigma_bar, p.kappa_y, p.kappa_z
    eye = np.eye(d)

    def drift(t, x, y, z):
        b = ky * sb * y * np.ones((1, d))
        if reformulated:
            return b
        return b + kz * ad.reshape(z, (-1, d))

    def diffusion(t, x, y):
        return ad.reshape(sb * y, (-1, 1, 1)) * eye

    def driver(t, x, y, z):
        s = ad.sum(ad.sin(x), axis=1, keepdims=True)
        c2 = ad.sum(ad.cos(x) * ad.cos(x), axis=1, keepdims=True)
        decay = math.exp(-3.0 * r * (T - t))
        zs = ad.sum(ad.reshape(z, (-1, d)), axis=1, keepdims=True)
        f = -r * y + 0.5 * decay * sb**2 * s * s * s - ky * zs - kz * sb * decay * s * c2
        if reformulated:
            f = f + kz * ad.sum(ad.reshape(z * z, (-1, d)), axis=1, keepdims=True) / (sb * y)
        return f

    def terminal(x):
        return ad.sum(ad.sin(x), axis=1, keepdims=True)

    def y_field(t, x):
        return math.exp(-r * (T - t)) * np.sin(x).sum(axis=1, keepdims=True)

    def z_field(t, x):
        s = np.sin(x).sum(axis=1, keepdims=True)
        return (math.exp(-2.0 * r * (T - t)) * sb * s * np.cos(x))[:, None, :]

    return FbsdeProblem(
        name="example1_reformulated" if reformulated else "example1",
        d=d,
        m=d,
        q=1,
        T=T,
        x0=np.full(d, math.pi / 4) if x0 is None else x0,
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal=terminal,
        y_field=y_field,
        z_field=z_field,
        params=p,
    )


# -- linear-quadratic control -------------------------------------------------


def _lq_dp(p: LqParams, T: float, x0, riccati_steps: int) -> FbsdeProblem:
    d = p.d
    sig_inv = p.sigma_inv
    gain = p.control_gain
    Mx, Rx, G = p.Mx, p.Rx, p.G

    def drift(t, x, y, z):
        v = ad.reshape(z, (-1, d)) @ sig_inv  # rows are (z Sigma^{-1})
        return x @ Mx.T - v @ gain.T

    def diffusion(t, x, y):
        return p.Sigma

    def driver(t, x, y, z):
        v = ad.reshape(z, (-1, d)) @ sig_inv
        quad_x = ad.sum(x * (x @ Rx.T), axis=1, keepdims=True)
        quad_z = ad.sum(v * (v @ gain.T), axis=1, keepdims=True)
        return 0.5 * (quad_x + quad_z)

    def terminal(x):
        return 0.5 * ad.sum(x * (x @ G.T), axis=1, keepdims=True)

    prob = FbsdeProblem(
        name="lq_dp",
        d=d,
        m=d,
        q=1,
        T=T,
        x0=np.full(d, 0.1) if x0 is None else x0,
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal=terminal,
        params=p,
    )
    return _attach_riccati(prob, p, T, riccati_steps, "dp")


def _lq_smp(p: LqParams, T: float, x0, riccati_steps: int) -> FbsdeProblem:
    d = p.d
    gain = p.control_gain
    Mx, Rx, G = p.Mx, p.Rx, p.G

    def drift(t, x, y, z):
        return x @ Mx.T + y @ gain.T

    def diffusion(t, x, y):
        return p.Sigma

    def driver(t, x, y, z):
        # adjoint equation uses Mx^T; identical to Mx for the diagonal presets
        return y @ Mx - x @ Rx.T

    def terminal(x):
        return -(x @ G.T)

    prob = FbsdeProblem(
        name="lq_smp",
        d=d,
        m=d,
        q=d,
        T=T,
        x0=np.full(d, 0.1) if x0 is None else x0,
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal=terminal,
        params=p,
    )
    return _attach_riccati(prob, p, T, riccati_steps, "smp")


def _attach_riccati(prob: FbsdeProblem, p: LqParams, T: float, steps: int, kind: str) -> FbsdeProblem:
    from .riccati import dp_fields, smp_fields, solve_riccati

    sol = solve_riccati(p, T, steps)
    fields_fn = dp_fields if kind == "dp" else smp_fields

    def y_field(t, x):
        return fields_fn(sol, t, x)[0]

    def z_field(t, x):
        return fields_fn(sol, t, x)[1]

    object.__setattr__(prob, "y_field", y_field)
    object.__setattr__(prob, "z_field", z_field)
    return prob


DEFAULT_T = {"example1": 0.25, "example1_reformulated": 0.25, "lq_dp": 0.5, "lq_smp": 1e-3}


def default_params(name: str):
    if name in ("example1", "example1_reformulated"):
        return Example1Params()
    if name in ("lq_dp", "lq_smp"):
        return LqParams.preset()
    raise ValueError(f"unknown problem {name!r}; expected one of {PROBLEM_NAMES}")


def problem_dims(name: str, params=None) -> tuple[int, int, int]:
    """(d, m, q) without building the problem (no Riccati solve)."""
    params = default_params(name) if params is None else params
    if name in ("example1", "example1_reformulated"):
        return params.d, params.d, 1
    if name == "lq_dp":
        d = params.Mx.shape[0]
        return d, params.Sigma.shape[1], 1
    if name == "lq_smp":
        d = params.Mx.shape[0]
        return d, params.Sigma.shape[1], d
    raise ValueError(f"unknown problem {name!r}; expected one of {PROBLEM_NAMES}")


def make_problem(name: str, params=None, T: float | None = None, x0=None, riccati_steps: int = 10_000) -> FbsdeProblem:
    """Build one of the benchmark problems by name."""
    params = default_params(name) if params is None else params
    T = DEFAULT_T[name] if T is None else float(T)
    if name in ("example1", "example1_reformulated"):
        if not isinstance(params, Example1Params):
            raise TypeError("example1 problems take Example1Params")
        return _example1(params, T, x0, reformulated=name.endswith("reformulated"))
    if not isinstance(params, LqParams):
        raise TypeError("LQ problems take LqParams")
    if name == "lq_dp":
        return _lq_dp(params, T, x0, riccati_steps)
    return _lq_smp(params, T, x0, riccati_steps)


def lipschitz_constants(name: str, params=None) -> LipschitzBundle:
    """Constants of the benchmark problems as stated with the examples (LQ-DP localized)."""
    if name == "example1_reformulated":
        raise ValueError("the reformulated driver is quadratic in z and has no global Lipschitz constant")
    params = default_params(name) if params is None else params
    if name == "example1":
        d, r, sb, ky, kz = params.d, params.r, params.sigma_bar, params.kappa_y, params.kappa_z
        return LipschitzBundle(
            Lg_x=d,
            Lb_y=2.0 * (ky * sb) ** 2,
            Lb_z=2.0 * kz**2,
            Ls_y=d * sb**2,
            Lf_x=1.5 * d * (3.0 * sb**2 * d**2 / 2.0 + 2.0 * kz * sb * d) ** 2,
            Lf_y=18.0 * r**2,
            Lf_z=3.6 * d * ky**2,
            kf=-r,
        )
    p = params
    if name == "lq_dp":
        gain = p.control_gain
        sig_inv = p.sigma_inv
        return LipschitzBundle(
            Lg_x=p.r_x**2 * spectral_norm(p.G) ** 2 / 2.0,
            Lb_x=2.0 * spectral_norm(p.Mx) ** 2,
            Lb_z=2.0 * spectral_norm(gain @ sig_inv.T) ** 2,
            Lf_x=p.r_x**2 * spectral_norm(p.Rx) ** 2,
            Lf_z=p.r_z**2 * spectral_norm(sig_inv @ gain @ sig_inv.T) ** 2,
            kb=-1.0,
        )
    if name == "lq_smp":
        return LipschitzBundle(
            Lg_x=spectral_norm(p.G) ** 2,
            Lb_x=2.0 * spectral_norm(p.Mx) ** 2,
            Lb_y=2.0 * spectral_norm(p.control_gain) ** 2,
            Lf_x=2.0 * spectral_norm(p.Rx) ** 2,
            Lf_y=2.0 * spectral_norm(p.Mx) ** 2,
            kb=-1.0,
            kf=-1.0,
        )
    raise ValueError(f"unknown problem {name!r}; expected one of {PROBLEM_NAMES}")


def eval_coefficients(problem: FbsdeProblem, t: float, x, y, z):
    """(drift, diffusion, driver) at a batch of points."""
    x, y, z = (np.asarray(a, dtype=np.float64) for a in (x, y, z))
    B = x.shape[0]
    if x.shape != (B, problem.d) or y.shape != (B, problem.q) or z.shape != (B, problem.q, problem.m):
        raise ValueError(
            f"expected x {(B, problem.d)}, y {(B, problem.q)}, z {(B, problem.q, problem.m)}; "
            f"got {x.shape}, {y.shape}, {z.shape}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        b = problem.drift(t, x, y, z)
        s = np.broadcast_to(problem.diffusion(t, x, y), (B, problem.d, problem.m))
        f = problem.driver(t, x, y, z)
    return b, s, f


def terminal(problem: FbsdeProblem, x):
    return problem.terminal(np.asarray(x, dtype=np.float64))
