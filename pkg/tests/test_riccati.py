from types import SimpleNamespace

import numpy as np
import pytest

from deepfbsde.problems import LqParams
from deepfbsde.riccati import RiccatiBlowup, dp_fields, smp_fields, solve_riccati, write_mesh_csv


def scalar_lq(g0=2.0, Mx=0.0, Rx=0.0, Sigma=1.0):
    return LqParams(
        Mx=np.array([[Mx]]),
        Mu=np.array([[1.0]]),
        Mc=np.zeros(1),
        Sigma=np.array([[Sigma]]),
        Rx=np.array([[Rx]]),
        Ru=1.0,
        G=np.array([[g0]]),
    )


def test_scalar_closed_form():
    g0, T = 2.0, 0.8
    sol = solve_riccati(scalar_lq(g0), T, steps=10_000)
    exact = g0 / (1 + g0 * (T - sol.times))
    assert np.max(np.abs(sol.P[:, 0, 0] - exact)) < 1e-8
    # c' = -P/2 with Sigma = 1 integrates to log(1 + g0 (T - t)) / 2
    np.testing.assert_allclose(sol.c, 0.5 * np.log(1 + g0 * (T - sol.times)), atol=1e-8)


def test_terminal_values_exact():
    lq = LqParams.preset()
    sol = solve_riccati(lq, 0.5, steps=200)
    assert np.array_equal(sol.P[-1], lq.G) and sol.c[-1] == 0.0
    assert np.array_equal(sol.P_at(0.5), lq.G)
    x = np.random.default_rng(0).normal(size=(7, 25))
    y, z = dp_fields(sol, 0.5, x)
    np.testing.assert_allclose(y[:, 0], 0.5 * np.einsum("bi,ij,bj->b", x, lq.G, x))
    ys, _ = smp_fields(sol, 0.5, x)
    np.testing.assert_allclose(ys, -x @ lq.G.T)


def test_symmetry_preserved():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(5, 5))
    lq = LqParams(
        Mx=A,
        Mu=rng.normal(size=(5, 1)),
        Mc=np.zeros(5),
        Sigma=np.diag(rng.uniform(0.5, 1.5, 5)),
        Rx=np.eye(5),
        Ru=1.5,
        G=np.eye(5) * 2,
    )
    sol = solve_riccati(lq, 1.0, steps=500)
    assert np.max(np.abs(sol.P - np.swapaxes(sol.P, 1, 2))) <= 1e-10


def test_rk4_self_convergence_order():
    lq = LqParams.preset()
    T = 0.5
    # the preset is stiff (G up to 50); the asymptotic regime starts near 1000 steps
    P = {s: solve_riccati(lq, T, s).P[0] for s in (1000, 2000, 4000)}
    ratio = np.max(np.abs(P[1000] - P[2000])) / np.max(np.abs(P[2000] - P[4000]))
    assert ratio == pytest.approx(16.0, rel=0.15)


def test_dp_fields_at_origin():
    sol = solve_riccati(LqParams.preset(), 0.5, steps=100)
    y, z = dp_fields(sol, 0.2, np.zeros((3, 25)))
    np.testing.assert_allclose(y[:, 0], sol.c_at(0.2))
    assert np.all(z == 0) and z.shape == (3, 1, 25)


def test_smp_is_minus_gradient_of_dp():
    sol = solve_riccati(LqParams.preset(), 0.5, steps=1000)
    rng = np.random.default_rng(2)
    for t in rng.uniform(0, 0.5, size=5):
        x = rng.normal(size=(10, 25))
        ys, zs = smp_fields(sol, t, x)
        # gradient of x^T P x / 2 + c
        grad = x @ sol.P_at(t)
        np.testing.assert_allclose(ys + grad, 0.0, atol=1e-8)
        _, zd = dp_fields(sol, t, x)
        np.testing.assert_allclose(zd[:, 0, :], (x @ sol.P_at(t)) @ sol.Sigma)
        assert zs.shape == (10, 25, 25)


def test_blowup_reported_with_time():
    # valid LQ data never blows up; a negative gain gives -P' = P^2, P(T) = 10,
    # which explodes at T - 1/10
    fake = SimpleNamespace(
        Mx=np.zeros((1, 1)), control_gain=-np.ones((1, 1)), Rx=np.zeros((1, 1)), G=np.array([[10.0]]), Sigma=np.eye(1)
    )
    with pytest.raises(RiccatiBlowup) as err:
        solve_riccati(fake, 1.0, steps=10_000)
    assert err.value.t == pytest.approx(0.9, abs=1e-3)


def test_bad_steps():
    with pytest.raises(ValueError):
        solve_riccati(scalar_lq(), 1.0, steps=0)


def test_interpolation_is_linear():
    sol = solve_riccati(scalar_lq(), 1.0, steps=4)
    mid = 0.5 * (sol.times[1] + sol.times[2])
    np.testing.assert_allclose(sol.P_at(mid), 0.5 * (sol.P[1] + sol.P[2]))
    with pytest.raises(ValueError):
        sol.P_at(1.5)


def test_mesh_csv(tmp_path):
    sol = solve_riccati(scalar_lq(), 1.0, steps=3)
    path = tmp_path / "mesh.csv"
    write_mesh_csv(sol, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,c,P_0_0"
    assert len(lines) == 5
    assert float(lines[-1].split(",")[0]) == 1.0
