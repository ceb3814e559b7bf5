import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distctl.model import (AgentState, DareError, ErrorState, dare_residual, discretize,
                           from_error, rollout, rollout_matrices, solve_dare, step, to_error)

finite = st.floats(-10, 10, allow_nan=False)


def kinematics(p0, v0, a, t):
    return p0 + v0 * t + 0.5 * a * t * t, v0 + a * t


def test_discretize_benchmark_input_column():
    m = discretize(0.2)
    np.testing.assert_allclose(m.Bd[:, 0], [0.02, 0, 0.2, 0], rtol=0, atol=1e-15)
    assert m.Ad[0, 2] == 0.2 and m.Ad[1, 3] == 0.2
    assert m.is_controllable()


def test_discretize_unit_sample_time():
    m = discretize(1.0)
    assert m.Ad[0, 2] == 1.0
    assert m.Bd[2, 0] == 1.0
    assert m.Bd[0, 0] == 0.5


@pytest.mark.parametrize("ts", [0.0, -0.1])
def test_discretize_rejects_nonpositive_ts(ts):
    with pytest.raises(ValueError):
        discretize(ts)


def test_three_step_rollout_matches_constant_acceleration():
    m = discretize(0.5)
    z = AgentState([0, 0], [0, 0])
    for _ in range(3):
        z = step(m, z, [1, 0])
    assert z.p[0] == pytest.approx(0.5 * 1 * 1.5 ** 2, abs=1e-15)
    assert z.k == 3


def test_step_examples():
    m = discretize(0.2)
    z = step(m, AgentState([0, 0], [0, 0]), [2, 0])
    np.testing.assert_allclose(z.p, [0.04, 0], atol=1e-15)
    np.testing.assert_allclose(z.v, [0.4, 0], atol=1e-15)

    rest = AgentState([1, 1], [0, 0])
    moved = step(m, rest, [0, 0])
    np.testing.assert_array_equal(moved.p, rest.p)
    np.testing.assert_array_equal(moved.v, rest.v)


def test_ten_steps_reach_two_metres():
    m = discretize(0.2)
    z = AgentState([0, 0], [0, 0])
    for _ in range(10):
        z = step(m, z, [1, 1])
    np.testing.assert_allclose(z.p, [2, 2], atol=1e-12)


def test_step_rejects_nonfinite_input():
    with pytest.raises(ValueError):
        step(discretize(0.2), AgentState([0, 0], [0, 0]), [np.nan, 0])


def test_error_coordinates():
    e = to_error(AgentState([0, 1], [0, 0]), [0, -1])
    np.testing.assert_array_equal(e.e, [0, 2, 0, 0])
    np.testing.assert_array_equal(to_error(AgentState([3, 4], [0, 0]), [3, 4]).e, np.zeros(4))


@given(st.lists(finite, min_size=6, max_size=6))
def test_error_round_trip(vals):
    z = AgentState(vals[:2], vals[2:4], 7)
    back = from_error(to_error(z, vals[4:6]), vals[4:6], 7)
    np.testing.assert_allclose(back.p, z.p, atol=1e-12)
    np.testing.assert_array_equal(back.v, z.v)


def test_rollout_zero_and_h1():
    m = discretize(0.2)
    np.testing.assert_array_equal(rollout(m, ErrorState(), np.zeros(6), 3), np.zeros((4, 4)))
    e0 = ErrorState([0.3, -0.2, 0.1, 0.5])
    traj = rollout(m, e0, [0.7, -1.1], 1)
    direct = step(m, AgentState.from_vector(e0.e), [0.7, -1.1])
    np.testing.assert_allclose(traj[1], direct.z, atol=1e-15)


def test_rollout_rejects_length_mismatch():
    with pytest.raises(ValueError):
        rollout(discretize(0.2), ErrorState(), np.zeros(5), 3)


def test_sensitivity_matrices_against_finite_differences():
    rng = np.random.default_rng(3)
    m = discretize(0.2)
    H = 4
    Phi, Gamma = rollout_matrices(m, H)
    e0 = ErrorState(rng.normal(size=4))
    u = rng.normal(size=2 * H)
    base = rollout(m, e0, u, H).ravel()
    np.testing.assert_allclose(Phi @ e0.e + Gamma @ u, base, atol=1e-13)
    h = 1e-3  # rollout is affine, so a large step has no truncation error
    for j in range(2 * H):
        du = np.zeros(2 * H)
        du[j] = h
        fd = (rollout(m, e0, u + du, H).ravel() - rollout(m, e0, u - du, H).ravel()) / (2 * h)
        col = Gamma[:, j]
        assert np.max(np.abs(fd - col)) <= 1e-9 * max(1.0, np.max(np.abs(col)))


@settings(max_examples=100)
@given(ts=st.floats(0.01, 0.5), ax=st.floats(-2, 2), ay=st.floats(-2, 2),
       k=st.integers(1, 50), p0=st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       v0=st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_zoh_exactness(ts, ax, ay, k, p0, v0):
    m = discretize(ts)
    a = np.array([ax, ay])
    traj = rollout(m, ErrorState(np.r_[p0, v0]), np.tile(a, k), k)
    p, v = kinematics(np.array(p0), np.array(v0), a, k * ts)
    np.testing.assert_allclose(traj[-1, :2], p, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(traj[-1, 2:], v, rtol=1e-12, atol=1e-12)


def test_state_and_error_trajectories_coincide():
    rng = np.random.default_rng(5)
    m = discretize(0.2)
    target = np.array([0.4, -1.3])
    z = AgentState(rng.normal(size=2), rng.normal(size=2))
    e = to_error(z, target)
    for _ in range(20):
        a = rng.uniform(-2, 2, size=2)
        z = step(m, z, a)
        e = ErrorState(m.Ad @ e.e + m.Bd @ a)
        np.testing.assert_allclose(from_error(e, target).z, z.z, atol=1e-13)


def test_dare_scalar_golden_ratio():
    P = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx((1 + math.sqrt(5)) / 2, abs=1e-9)


def test_dare_zero_dynamics_returns_q():
    Q = np.diag([1.0, 2.0, 3.0, 4.0])
    P = solve_dare(np.zeros((4, 4)), discretize(0.2).Bd, Q, 2 * np.eye(2))
    np.testing.assert_allclose(P, Q, atol=1e-14)


def test_dare_benchmark_system_residual():
    m = discretize(0.2)
    Q, R = 5 * np.eye(4), 2 * np.eye(2)
    P = solve_dare(m.Ad, m.Bd, Q, R)
    assert dare_residual(m.Ad, m.Bd, Q, R, P) < 1e-10
    np.testing.assert_array_equal(P, P.T)
    assert np.min(np.linalg.eigvalsh(P)) >= -1e-10


def test_dare_reports_nonconvergence():
    m = discretize(0.2)
    with pytest.raises(DareError) as info:
        solve_dare(m.Ad, m.Bd, 5 * np.eye(4), 2 * np.eye(2), max_iter=3)
    assert info.value.residual > 0
    assert info.value.iterations == 3
