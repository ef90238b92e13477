import math
from dataclasses import replace

import numpy as np
import pytest

from deepfbsde.problems import FbsdeProblem, make_problem
from deepfbsde.sde import (
    AnalyticPolicy,
    TimeGrid,
    euler_rollout,
    reference_rollout,
    sample_brownian,
)


def test_time_grid():
    g = TimeGrid(0.3, 7)
    assert g.times[-1] == 0.3 and len(g.times) == 8
    np.testing.assert_allclose(np.diff(g.times), 0.3 / 7)
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 3)


def test_increment_moments():
    b = sample_brownian(N=1, m=1, batch=100_000, seed=3, T=0.25)
    dw = b.dW.ravel()
    assert abs(dw.mean()) < 4 * math.sqrt(0.25 / 1e5)
    assert dw.var() == pytest.approx(0.25, rel=0.05)


def test_coarse_is_sum_of_fine():
    b = sample_brownian(N=4, m=2, batch=16, seed=1, T=1.0, refinement=10)
    fine = b.fine.reshape(16, 4, 10, 2)
    assert np.array_equal(b.dW, fine.sum(axis=2))
    assert b.fine.var() == pytest.approx(1.0 / 40, rel=0.2)


def test_same_seed_bit_identical():
    a = sample_brownian(N=5, m=3, batch=8, seed=42)
    b = sample_brownian(N=5, m=3, batch=8, seed=42)
    c = sample_brownian(N=5, m=3, batch=8, seed=43)
    assert np.array_equal(a.dW, b.dW) and not np.array_equal(a.dW, c.dW)


class ConstantNets:
    def __init__(self, y0, z):
        self._y0, self._z = y0, z

    def y0(self, x):
        return np.full((x.shape[0], 1), self._y0)

    def z(self, i, t, x):
        return np.full((x.shape[0], 1, x.shape[1]), self._z)


def _brownian_problem(d=3):
    base = make_problem("example1", T=1.0)
    return replace(
        base,
        name="brownian",
        d=d,
        m=d,
        x0=np.linspace(-1, 1, d),
        drift=lambda t, x, y, z: np.zeros_like(x),
        diffusion=lambda t, x, y: np.eye(d),
        driver=lambda t, x, y, z: np.zeros_like(y),
        y_field=None,
        z_field=None,
    )


def test_pure_brownian_rollout():
    p = _brownian_problem()
    grid = TimeGrid(1.0, 6)
    dW = sample_brownian(6, 3, 10, seed=0, T=1.0).dW
    traj = euler_rollout(p, ConstantNets(1.5, 0.0), grid, dW)
    np.testing.assert_allclose(traj.X[:, -1], p.x0 + dW.sum(axis=1), rtol=1e-13)
    assert np.all(traj.Y == 1.5)
    assert traj.X.shape == (10, 7, 3) and traj.Z.shape == (10, 6, 3)
    assert np.all(traj.X[:, 0] == p.x0)


def test_shape_contract():
    p = _brownian_problem()
    with pytest.raises(ValueError):
        euler_rollout(p, ConstantNets(0, 0), TimeGrid(1.0, 4), np.zeros((2, 5, 3)))


def test_divergence_flagged_per_row():
    p = replace(_brownian_problem(), drift=lambda t, x, y, z: x * 1e7)
    dW = np.zeros((4, 3, 3))
    traj = euler_rollout(p, ConstantNets(0, 0), TimeGrid(1.0, 3), dW)
    assert traj.diverged.all()
    p2 = replace(_brownian_problem(1), x0=np.zeros(1), drift=lambda t, x, y, z: x * 1e8)
    dW = np.zeros((2, 3, 1))
    dW[0, 0, 0] = 1.0
    traj = euler_rollout(p2, ConstantNets(0, 0), TimeGrid(1.0, 3), dW)
    assert traj.diverged.tolist() == [True, False]


@pytest.mark.parametrize("name", ["example1", "lq_dp", "lq_smp"])
def test_analytic_rollout_reproduces_reference(name):
    p = make_problem(name, riccati_steps=500)
    grid = TimeGrid(p.T, 5)
    ref = reference_rollout(p, grid, 64, seed=9, refinement=1)
    traj = euler_rollout(p, AnalyticPolicy(p, pin_y=True), grid, ref.dW)
    assert np.array_equal(traj.X, ref.X)
    assert np.array_equal(traj.Y, ref.Y)
    assert np.array_equal(traj.Z, ref.Z)


def test_reference_consumes_aggregated_noise():
    p = make_problem("example1")
    grid = TimeGrid(p.T, 4)
    fine = sample_brownian(4, 10, 32, seed=5, T=p.T, refinement=25)
    ref = reference_rollout(p, grid, 32, seed=5, refinement=25)
    assert np.array_equal(ref.dW, fine.dW)
    ref2 = reference_rollout(p, grid, 32, seed=0, refinement=25, fine_dW=fine.fine)
    assert np.array_equal(ref2.X, ref.X)


def test_reference_initial_value_is_deterministic():
    p = make_problem("example1")
    ref = reference_rollout(p, TimeGrid(p.T, 2), 16, seed=1, refinement=3)
    np.testing.assert_allclose(ref.Y[:, 0, 0], math.exp(-0.25) * 10 * math.sin(math.pi / 4))


def test_reference_strong_order_half():
    p = make_problem("example1", T=1.0)
    grid = TimeGrid(p.T, 1)
    levels = [8, 16, 32, 64, 128]
    finest = sample_brownian(1, p.m, 2000, seed=2, T=p.T, refinement=256).fine
    X = {}
    for r in levels + [256]:
        fine = finest.reshape(2000, r, 256 // r, p.m).sum(axis=2)
        X[r] = reference_rollout(p, grid, 2000, 0, refinement=r, fine_dW=fine).X[:, -1]
    hs = np.array([p.T / r for r in levels])
    rms = np.array([np.sqrt(((X[r] - X[2 * r]) ** 2).sum(axis=1).mean()) for r in levels])
    slope = np.polyfit(np.log(hs), np.log(rms), 1)[0]
    # doubling N' is a self-convergence test; Euler with multiplicative noise has strong order 1/2
    assert slope == pytest.approx(0.5, abs=0.2)


def test_smp_reference_follows_riccati():
    p = make_problem("lq_smp", riccati_steps=1000)
    grid = TimeGrid(p.T, 4)
    ref = reference_rollout(p, grid, 32, seed=3, refinement=5)
    from deepfbsde.riccati import solve_riccati

    sol = solve_riccati(p.params, p.T, 1000)
    for i, t in enumerate(grid.times):
        np.testing.assert_allclose(ref.Y[:, i], -ref.X[:, i] @ sol.P_at(t), rtol=1e-12, atol=1e-14)


def test_row_permutation_equivariance():
    p = make_problem("example1")
    grid = TimeGrid(p.T, 3)
    dW = sample_brownian(3, 10, 12, seed=8, T=p.T).dW
    perm = np.random.default_rng(0).permutation(12)
    a = euler_rollout(p, AnalyticPolicy(p), grid, dW)
    b = euler_rollout(p, AnalyticPolicy(p), grid, dW[perm])
    np.testing.assert_array_equal(a.X[perm], b.X)
    np.testing.assert_array_equal(a.Y[perm], b.Y)


def test_reformulated_near_analytic_flags_some_paths():
    p = make_problem("example1_reformulated")
    grid = TimeGrid(p.T, 10)
    ref = reference_rollout(p, grid, 2**12, seed=4, refinement=1)
    traj = euler_rollout(p, AnalyticPolicy(p), grid, ref.dW)
    assert traj.diverged.any(), f"max |Y| = {np.abs(traj.Y).max():.2f}, min |Y| = {np.abs(traj.Y).min():.2f}"


def test_problem_type_is_frozen():
    p = make_problem("example1")
    assert isinstance(p, FbsdeProblem)
    with pytest.raises(Exception):
        p.T = 2.0
