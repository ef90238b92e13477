import math
from dataclasses import replace

import numpy as np
import pytest

from deepfbsde import autodiff as ad
from deepfbsde.problems import Example1Params, make_problem
from deepfbsde.sde import AnalyticPolicy, TimeGrid, TrajectoryBatch, reference_rollout
from deepfbsde.solver import (
    DIVERGENCE_WINDOW,
    EvalConfig,
    NetworkStack,
    TrainingConfig,
    _taped_loss,
    coarsen_reference,
    convergence_study,
    evaluate,
    fit_rate,
    loss,
    train,
)


def _traj(x_last, y_last, diverged=None):
    x_last, y_last = np.asarray(x_last, float), np.asarray(y_last, float)
    B = x_last.shape[0]
    return TrajectoryBatch(
        xs=[x_last], ys=[y_last], zs=[], diverged=np.zeros(B, bool) if diverged is None else np.asarray(diverged)
    )


class _Terminal:
    """Stand-in problem exposing only the terminal function."""

    def __init__(self, fn):
        self.terminal = fn


def test_loss_zero_when_terminal_matched():
    p = _Terminal(lambda x: x[:, :1] * 2.0)
    assert loss(_traj([[1.0], [3.0]], [[2.0], [6.0]]), p) == 0.0


def test_loss_two_paths():
    # mismatches 1 and 3 give (1 + 9) / 2
    p = _Terminal(lambda x: np.zeros((x.shape[0], 1)))
    assert loss(_traj([[0.0], [0.0]], [[1.0], [3.0]]), p) == 5.0


def test_loss_vector_valued_uses_euclidean_norm():
    p = _Terminal(lambda x: np.zeros((x.shape[0], 2)))
    assert loss(_traj([[0.0]], [[1.0, 2.0]]), p) == 5.0


def test_loss_skips_diverged_rows_and_nan_if_none_left():
    p = _Terminal(lambda x: np.zeros((x.shape[0], 1)))
    assert loss(_traj([[0.0], [0.0]], [[1.0], [1e20]], diverged=[False, True]), p) == 1.0
    assert math.isnan(loss(_traj([[0.0]], [[1.0]], diverged=[True]), p))


@pytest.fixture(scope="module")
def ex1():
    return make_problem("example1")


@pytest.fixture(scope="module")
def small():
    return make_problem("example1", Example1Params(d=2))


def test_analytic_policy_has_zero_error(ex1):
    grid = TimeGrid(ex1.T, 4)
    ref = reference_rollout(ex1, grid, 64, seed=3, refinement=1)
    rep = evaluate(ex1, AnalyticPolicy(ex1, pin_y=True), grid, reference=ref)
    assert rep.err_x == rep.err_y == rep.err_z == rep.total == 0.0
    assert rep.diverged_fraction == 0.0


class _ZeroNets:
    def __init__(self, q, m):
        self.q, self.m = q, m

    def y0(self, x):
        return np.zeros((x.shape[0], self.q))

    def z(self, i, t, x):
        return np.zeros((x.shape[0], self.q, self.m))


def test_zero_y0_error_bounded_below_by_y0_squared(ex1):
    grid = TimeGrid(ex1.T, 5)
    rep = evaluate(ex1, _ZeroNets(1, ex1.m), grid, paths=256, fine_steps=50)
    y0 = ex1.y_field(0.0, ex1.x0[None])[0, 0]
    assert rep.err_y >= y0**2
    assert rep.total == rep.err_x + rep.err_y + rep.err_z
    assert rep.loss_dominated and rep.loss > grid.h
    assert rep.rel_y > 0 and rep.rel_total > 0


def test_fine_steps_must_divide(ex1):
    with pytest.raises(ValueError, match="multiple"):
        evaluate(ex1, _ZeroNets(1, ex1.m), TimeGrid(ex1.T, 3), paths=8, fine_steps=10)


def test_reformulated_shares_the_reference_solution(ex1):
    p = make_problem("example1_reformulated")
    grid = TimeGrid(p.T, 2)
    a = reference_rollout(p, grid, 8, seed=1, refinement=2)
    b = reference_rollout(ex1, grid, 8, seed=1, refinement=2)
    np.testing.assert_allclose(a.Y, b.Y, rtol=1e-2)
    rep = evaluate(p, NetworkStack.init(p, 2, 0), grid, paths=8, fine_steps=4)
    assert math.isfinite(rep.total)


def test_fit_rate_recovers_power_law():
    hs = np.array([0.25, 0.05, 0.025, 0.0125])
    assert fit_rate(hs, 3.0 * hs) == pytest.approx(1.0, abs=1e-12)
    assert fit_rate(hs, 0.2 * hs**0.5) == pytest.approx(0.5, abs=1e-12)
    assert math.isnan(fit_rate(hs[:1], hs[:1]))


def test_coarsened_reference_matches_direct(ex1):
    fine = reference_rollout(ex1, TimeGrid(ex1.T, 6), 16, seed=2, refinement=5)
    coarse = coarsen_reference(fine, 3)
    direct = reference_rollout(ex1, TimeGrid(ex1.T, 2), 16, seed=0, refinement=15, fine_dW=None)
    assert coarse.X.shape == direct.X.shape and coarse.dW.shape == (16, 2, ex1.m)
    np.testing.assert_allclose(coarse.dW, fine.dW.reshape(16, 2, 3, -1).sum(axis=2))
    assert np.array_equal(coarse.X[:, 1], fine.X[:, 3])
    with pytest.raises(ValueError):
        coarsen_reference(fine, 4)


def test_network_stack_shapes_and_flat_round_trip(ex1):
    nets = NetworkStack.init(ex1, 3, seed=1)
    x = np.random.default_rng(0).normal(size=(5, ex1.d))
    assert nets.y0(x).shape == (5, 1) and nets.z(2, 0.1, x).shape == (5, 1, ex1.m)
    again = NetworkStack.from_flat(nets.flat(), nets.q, nets.m)
    assert again.N == 3
    np.testing.assert_array_equal(again.z(1, 0.0, x), nets.z(1, 0.0, x))
    # Y0 is a single learned value broadcast to the batch
    assert np.all(nets.y0(x) == nets.y0(x)[0])


def test_loss_gradient_matches_finite_differences(small):
    nets = NetworkStack.init(small, 2, seed=4)
    grid = TimeGrid(small.T, 2)
    dW = np.random.default_rng(1).normal(size=(16, 2, small.m)) * math.sqrt(grid.h)
    tape, value, bad = _taped_loss(small, nets, grid, dW, np.float64)
    assert not bad.any() and tape.root is value
    assert ad.finite_diff_check(tape, eps=1e-6, max_entries=12) < 1e-5


def test_training_reduces_loss_and_is_reproducible(small):
    cfg = TrainingConfig(N=2, batch=64, iterations=150, seed=5)
    a = train(small, cfg)
    b = train(small, cfg)
    assert a.losses == b.losses
    assert all(np.array_equal(u, v) for u, v in zip(a.nets.flat().values(), b.nets.flat().values()))
    assert np.mean(a.losses[-20:]) < 0.1 * np.mean(a.losses[:20])
    assert a.learning_rates[0] == pytest.approx(1e-2)
    assert not a.diverged and not any(a.diverged_iterations)
    c = train(small, replace(cfg, seed=6))
    assert c.losses != a.losses


def test_float32_training_runs(small):
    res = train(small, TrainingConfig(N=2, batch=16, iterations=5, precision="f32"))
    assert res.nets.y0_params["W1"].dtype == np.float32
    assert all(math.isfinite(v) for v in res.losses)


def test_persistent_divergence_stops_early(small):
    exploding = replace(small, drift=lambda t, x, y, z: x * 1e14)
    res = train(exploding, TrainingConfig(N=2, batch=8, iterations=DIVERGENCE_WINDOW + 100))
    assert res.diverged
    assert len(res.losses) == DIVERGENCE_WINDOW
    assert all(math.isnan(v) for v in res.losses)


def test_short_divergent_run_still_flagged(small):
    exploding = replace(small, drift=lambda t, x, y, z: x * 1e14)
    assert train(exploding, TrainingConfig(N=2, batch=4, iterations=10)).diverged


def test_bad_training_config():
    with pytest.raises(ValueError):
        TrainingConfig(N=0)
    with pytest.raises(ValueError):
        TrainingConfig(N=2, precision="f16")
    with pytest.raises(ValueError):
        EvalConfig(paths=0)


def test_small_study_is_deterministic(small):
    cfg = TrainingConfig(N=1, batch=32, iterations=20)
    ev = EvalConfig(paths=64, fine_steps=20)
    s1 = convergence_study(small, [1, 2], 2, cfg, ev)
    s2 = convergence_study(small, [1, 2], 2, cfg, ev)
    assert [r.total for r in s1.runs] == [r.total for r in s2.runs]
    assert [r.N for r in s1.rows] == [1, 2]
    assert [r.seed for r in s1.runs] == [0, 1, 0, 1]
    row = s1.rows[0]
    totals = [r.total for r in s1.runs if r.N == 1]
    assert row.total_mean == pytest.approx(np.mean(totals)) and row.total_std == pytest.approx(np.std(totals))
    assert set(s1.rates) == {"err_x", "err_y", "err_z", "total"}


def test_study_rejects_bad_inputs(small):
    cfg = TrainingConfig(N=1, iterations=1)
    with pytest.raises(ValueError, match="ascending"):
        convergence_study(small, [2, 1], 1, cfg)
    with pytest.raises(ValueError, match="lcm"):
        convergence_study(small, [3, 7], 1, cfg, EvalConfig(fine_steps=20))


def test_partially_diverged_batch_trains_on_survivors(small):
    # rows that start their first step above 1 explode; the rest stay finite
    def drift(t, x, y, z):
        hot = ad.value_of(x)[:, :1] > 1.0
        return ad.where(np.broadcast_to(hot, ad.value_of(x).shape), x * 1e14, x * 0.0)

    p = replace(small, x0=np.full(2, 1.0), drift=drift)
    res = train(p, TrainingConfig(N=2, batch=32, iterations=5))
    assert all(math.isfinite(v) for v in res.losses)
    assert all(res.diverged_iterations)
    assert all(np.all(np.isfinite(v)) for v in res.nets.flat().values())
