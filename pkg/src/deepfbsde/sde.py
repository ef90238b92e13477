"""Brownian increments, unrolled Euler-Maruyama rollouts and fine-grid references."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad

DIVERGENCE_BOUND = 1e12


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise ValueError("need N >= 1 and T > 0")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.h
        t[-1] = self.T
        return t

    def refine(self, factor: int) -> TimeGrid:
        return TimeGrid(self.T, self.N * factor)


@dataclass(frozen=True, eq=False)
class BrownianBatch:
    dW: np.ndarray  # (batch, N, m), variance h
    seed: int
    refinement: int = 1
    fine: np.ndarray | None = None  # (batch, N * refinement, m), variance h / refinement


def brownian_blocks(batch: int, N: int, m: int, T: float, seed: int, refinement: int = 1) -> Iterator[np.ndarray]:
    """Yield fine increments one coarse step at a time, each shaped (batch, refinement, m).

    Streaming keeps memory bounded for very fine reference grids; the sequence is
    a pure function of the arguments.
    """
    if min(batch, N, m, refinement) < 1:
        raise ValueError("batch, N, m and refinement must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    scale = np.sqrt(T / (N * refinement))
    for _ in range(N):
        yield rng.standard_normal((batch, refinement, m)) * scale


def sample_brownian(
    N: int, m: int, batch: int, seed: int, T: float = 1.0, refinement: int = 1, keep_fine: bool = True
) -> BrownianBatch:
    blocks = list(brownian_blocks(batch, N, m, T, seed, refinement))
    coarse = np.stack([b.sum(axis=1) for b in blocks], axis=1)
    fine = np.concatenate(blocks, axis=1) if keep_fine and refinement > 1 else None
    if keep_fine and refinement == 1:
        fine = coarse
    return BrownianBatch(dW=coarse, seed=seed, refinement=refinement, fine=fine)


@dataclass(eq=False)
class TrajectoryBatch:
    """States of a rollout; entries of xs/ys/zs are arrays or tape Vars."""

    xs: list
    ys: list
    zs: list
    diverged: np.ndarray

    @property
    def X(self) -> np.ndarray:
        return np.stack([ad.value_of(v) for v in self.xs], axis=1)

    @property
    def Y(self) -> np.ndarray:
        return np.stack([ad.value_of(v) for v in self.ys], axis=1)

    @property
    def Z(self) -> np.ndarray:
        zs = [ad.value_of(v) for v in self.zs]
        return np.stack([z.reshape(z.shape[0], -1) for z in zs], axis=1)

    @property
    def diverged_fraction(self) -> float:
        return float(np.mean(self.diverged)) if self.diverged.size else 0.0


def _bad_rows(*arrays) -> np.ndarray:
    bad = None
    for a in arrays:
        a = ad.value_of(a)
        flat = a.reshape(a.shape[0], -1) if a.ndim > 1 else a[:, None]
        rows = ~np.all(np.isfinite(flat) & (np.abs(flat) <= DIVERGENCE_BOUND), axis=1)
        bad = rows if bad is None else bad | rows
    return bad


def euler_step(problem, t: float, h: float, x, y, z, dw: np.ndarray):
    """One step of the forward/backward Euler scheme, returns (x_next, y_next)."""
    d, m, q = problem.d, problem.m, problem.q
    dw_col = dw.reshape(-1, m, 1)
    b = problem.drift(t, x, y, z)
    s = problem.diffusion(t, x, y)
    x_next = x + b * h + ad.reshape(s @ dw_col, (-1, d))
    f = problem.driver(t, x, y, z)
    y_next = y - f * h + ad.reshape(z @ dw_col, (-1, q))
    return x_next, y_next


def _forward_only_step(problem, t, h, x, y, z, dw):
    d, m = problem.d, problem.m
    b = problem.drift(t, x, y, z)
    s = problem.diffusion(t, x, y)
    return x + b * h + (s @ dw.reshape(-1, m, 1)).reshape(-1, d)


class AnalyticPolicy:
    """Decoupling fields used in place of networks.

    With ``pin_y`` the rollout resets Y to the field value at every node, which
    makes it coincide with :func:`reference_rollout` on the same grid.
    """

    def __init__(self, problem, pin_y: bool = False):
        if not problem.has_fields:
            raise ValueError(f"problem {problem.name!r} has no decoupling fields")
        self.problem = problem
        self.pin_y = pin_y

    def y0(self, x):
        return self.problem.y_field(0.0, x)

    def z(self, i: int, t: float, x):
        return self.problem.z_field(t, x)

    def y_at(self, t: float, x):
        return self.problem.y_field(t, x)


def euler_rollout(problem, policy, grid: TimeGrid, dW: np.ndarray) -> TrajectoryBatch:
    """Unrolled scheme: Y0 from the policy, Z_i = policy.z(i, t_i, X_i).

    Works on plain arrays or on a tape (when the policy holds tape Vars).
    Rows whose states leave [-1e12, 1e12] or become non-finite are flagged.
    """
    B, N, m = dW.shape
    if N != grid.N or m != problem.m:
        raise ValueError(f"dW shape {dW.shape} does not match grid N={grid.N}, m={problem.m}")
    h = grid.h
    times = grid.times
    pin = getattr(policy, "pin_y", False)
    x = np.broadcast_to(problem.x0, (B, problem.d)).copy()
    y = policy.y0(x)
    xs, ys, zs = [x], [], []
    diverged = np.zeros(B, dtype=bool)
    with np.errstate(all="ignore"):
        for i in range(N):
            t = float(times[i])
            if pin:
                y = policy.y_at(t, ad.value_of(x))
            ys.append(y)
            z = policy.z(i, t, x)
            zs.append(z)
            x, y = euler_step(problem, t, h, x, y, z, dW[:, i, :])
            diverged |= _bad_rows(x, y, z)
            xs.append(x)
        if pin:
            y = policy.y_at(float(times[N]), ad.value_of(x))
        ys.append(y)
        diverged |= _bad_rows(y)
    return TrajectoryBatch(xs=xs, ys=ys, zs=zs, diverged=diverged)


@dataclass(frozen=True, eq=False)
class ReferenceBatch:
    X: np.ndarray  # (batch, N+1, d)
    Y: np.ndarray  # (batch, N+1, q)
    Z: np.ndarray  # (batch, N, q*m)
    dW: np.ndarray  # (batch, N, m) aggregated coarse increments
    refinement: int
    diverged: np.ndarray = field(default=None)


def reference_rollout(
    problem, grid: TimeGrid, batch: int, seed: int, refinement: int = 1, fine_dW: np.ndarray | None = None
) -> ReferenceBatch:
    """Forward SDE on the fine grid driven by the decoupling fields, sampled at coarse nodes.

    Noise comes from :func:`brownian_blocks` with ``seed`` unless ``fine_dW``
    (batch, N * refinement, m) is given.  The returned coarse increments are
    exact sums of the fine ones.
    """
    if not problem.has_fields:
        raise ValueError(f"problem {problem.name!r} has no decoupling fields")
    N, r = grid.N, refinement
    d, m, q = problem.d, problem.m, problem.q
    if fine_dW is not None:
        if fine_dW.shape != (batch, N * r, m):
            raise ValueError(f"fine_dW must have shape {(batch, N * r, m)}")
        blocks = (fine_dW[:, i * r : (i + 1) * r, :] for i in range(N))
    else:
        blocks = brownian_blocks(batch, N, m, grid.T, seed, r)
    hf = grid.T / (N * r)
    X = np.empty((batch, N + 1, d))
    Y = np.empty((batch, N + 1, q))
    Z = np.empty((batch, N, q * m))
    dW = np.empty((batch, N, m))
    x = np.broadcast_to(problem.x0, (batch, d)).copy()
    coarse_times = grid.times
    with np.errstate(all="ignore"):
        for i, block in enumerate(blocks):
            X[:, i] = x
            for j in range(r):
                t = float(coarse_times[i]) if j == 0 else (i * r + j) * hf
                y = problem.y_field(t, x)
                z = problem.z_field(t, x)
                if j == 0:
                    Y[:, i] = y
                    Z[:, i] = z.reshape(batch, -1)
                x = _forward_only_step(problem, t, hf, x, y, z, block[:, j, :])
            dW[:, i] = block.sum(axis=1)
        X[:, N] = x
        Y[:, N] = problem.y_field(float(coarse_times[N]), x)
    diverged = _bad_rows(X, Y, Z)
    return ReferenceBatch(X=X, Y=Y, Z=Z, dW=dW, refinement=r, diverged=diverged)
