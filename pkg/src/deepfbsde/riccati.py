"""Reference decoupling fields for the LQ benchmark via a matrix Riccati ODE.

    -P' = Mx^T P + P Mx - P Mu Ru^{-1} Mu^T P + Rx,   P(T) = G
    -c' = tr(Sigma Sigma^T P) / 2,                      c(T) = 0

integrated backward in time with classical RK4.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLOWUP_NORM = 1e12


class RiccatiBlowup(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"Riccati solution exceeded {BLOWUP_NORM:g} in norm at t={t:g}")
        self.t = t


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    times: np.ndarray  # (steps+1,) increasing, times[-1] == T
    P: np.ndarray  # (steps+1, d, d)
    c: np.ndarray  # (steps+1,)
    Sigma: np.ndarray

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def _locate(self, t: float) -> tuple[int, float]:
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        k = int(np.searchsorted(times, t, side="right")) - 1
        k = min(max(k, 0), len(times) - 2)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return k, min(max(w, 0.0), 1.0)

    def P_at(self, t: float) -> np.ndarray:
        k, w = self._locate(t)
        if w == 0.0:
            return self.P[k]
        if w == 1.0:
            return self.P[k + 1]
        return (1.0 - w) * self.P[k] + w * self.P[k + 1]

    def c_at(self, t: float) -> float:
        k, w = self._locate(t)
        return float((1.0 - w) * self.c[k] + w * self.c[k + 1])


def solve_riccati(lq, T: float, steps: int = 10_000) -> RiccatiSolution:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    Mx, gain, Rx, G = lq.Mx, lq.control_gain, lq.Rx, lq.G
    ssT = lq.Sigma @ lq.Sigma.T

    def rhs(P):
        # derivative with respect to backward time s = T - t
        dP = Mx.T @ P + P @ Mx - P @ gain @ P + Rx
        dc = 0.5 * np.trace(ssT @ P)
        return dP, dc

    h = T / steps
    P = np.array(G, dtype=np.float64)
    c = 0.0
    Ps = np.empty((steps + 1, *P.shape))
    cs = np.empty(steps + 1)
    Ps[steps], cs[steps] = P, c
    for k in range(steps, 0, -1):
        k1, l1 = rhs(P)
        k2, l2 = rhs(P + 0.5 * h * k1)
        k3, l3 = rhs(P + 0.5 * h * k2)
        k4, l4 = rhs(P + h * k3)
        P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)
        c = c + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        if not np.all(np.isfinite(P)) or np.linalg.norm(P) > BLOWUP_NORM:
            raise RiccatiBlowup(T - (steps - k + 1) * h)
        Ps[k - 1], cs[k - 1] = P, c
    times = np.linspace(0.0, T, steps + 1)
    times[-1] = T
    return RiccatiSolution(times=times, P=Ps, c=cs, Sigma=np.asarray(lq.Sigma))


def dp_fields(sol: RiccatiSolution, t: float, x: np.ndarray):
    """Value function y = x^T P x / 2 + c and z = x^T P Sigma, batched over rows of x."""
    P = sol.P_at(t)
    Px = x @ P  # P symmetric
    y = 0.5 * np.sum(x * Px, axis=1, keepdims=True) + sol.c_at(t)
    z = (Px @ sol.Sigma)[:, None, :]
    return y, z


def smp_fields(sol: RiccatiSolution, t: float, x: np.ndarray):
    """Adjoint y = -P x and z = -P Sigma (the same matrix for every row)."""
    P = sol.P_at(t)
    y = -(x @ P)
    z = np.broadcast_to(-(P @ sol.Sigma), (x.shape[0], *P.shape))
    return y, z


def write_mesh_csv(sol: RiccatiSolution, path: str | Path) -> None:
    """One row per mesh node: t, c, then P row-major as P_i_j."""
    d = sol.P.shape[1]
    header = ["t", "c"] + [f"P_{i}_{j}" for i in range(d) for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, c, P in zip(sol.times, sol.c, sol.P):
            w.writerow([repr(float(t)), repr(float(c))] + [repr(float(v)) for v in P.ravel()])
