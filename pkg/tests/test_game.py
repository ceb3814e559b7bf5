import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distctl.game import (CostParams, LocalGame, cost, phi, phi_matrices, project_box,
                          pseudo_gradient, sigma_true)
from distctl.model import ErrorState, discretize, solve_dare

I4, I2 = np.eye(4), np.eye(2)


def _params(pa=1.0, N=1, po=(0.0, 0.0), beta=1.0, P=I4, Q=I4, R=I2):
    return CostParams(Q=Q, R=R, P=P, beta=beta, pa=pa, po=np.array(po), N=N)


def test_phi_example():
    m = discretize(0.2)
    # at rest at the target, zero input: terminal position is the target itself
    np.testing.assert_allclose(phi(m, ErrorState(), np.zeros(6), [0, 1]), [0, 1])
    # constant unit x-acceleration over 3 steps of 0.2 s: 0.5 * 1 * 0.6^2 = 0.18
    u = np.tile([1.0, 0.0], 3)
    np.testing.assert_allclose(phi(m, ErrorState(), u, [0, 1]), [0.18, 1], atol=1e-14)


def test_phi_matrices_by_finite_difference():
    m = discretize(0.2)
    e0 = ErrorState([0.3, -0.2, 0.1, 0.4])
    M, c = phi_matrices(m, e0, [1.0, -1.0], 3)
    base = np.random.default_rng(0).normal(size=6)
    np.testing.assert_allclose(c + M @ base, phi(m, e0, base, [1.0, -1.0]), atol=1e-13)
    h = 1e-6
    fd = np.column_stack([(phi(m, e0, base + h * np.eye(6)[k], [1.0, -1.0])
                           - phi(m, e0, base - h * np.eye(6)[k], [1.0, -1.0])) / (2 * h)
                          for k in range(6)])
    np.testing.assert_allclose(fd, M, atol=1e-8)


@given(arrays(float, 6, elements=st.floats(-2, 2)), arrays(float, 6, elements=st.floats(-2, 2)),
       st.floats(-3, 3))
def test_phi_is_affine(u1, u2, t):
    m = discretize(0.2)
    e0 = ErrorState([0.5, 0.5, -0.1, 0.2])
    mix = phi(m, e0, t * u1 + (1 - t) * u2, [0, 0])
    np.testing.assert_allclose(mix, t * phi(m, e0, u1, [0, 0]) + (1 - t) * phi(m, e0, u2, [0, 0]),
                               atol=1e-9)


def test_sigma_true_benchmark_is_origin():
    m = discretize(0.2)
    starts = np.array([[0, 1], [0, -1], [1, 0], [-1, 0]], dtype=float)
    targets = starts[[1, 0, 3, 2]]
    e0s = [ErrorState(np.r_[s - t, 0, 0]) for s, t in zip(starts, targets)]
    np.testing.assert_allclose(sigma_true(m, np.zeros((4, 6)), e0s, targets), [0, 0], atol=1e-14)


def test_sigma_true_single_agent_and_mean():
    m = discretize(0.2)
    rng = np.random.default_rng(3)
    us = rng.uniform(-2, 2, size=(3, 6))
    e0s = [ErrorState(rng.normal(size=4)) for _ in range(3)]
    targets = rng.normal(size=(3, 2))
    np.testing.assert_allclose(sigma_true(m, us[:1], e0s[:1], targets[:1]),
                               phi(m, e0s[0], us[0], targets[0]))
    expected = np.mean([phi(m, e, u, t) for u, e, t in zip(us, e0s, targets)], axis=0)
    np.testing.assert_allclose(sigma_true(m, us, e0s, targets), expected)


def test_cost_hand_value():
    m = discretize(0.2)
    # one stage of |e0|^2 = 1 plus a terminal |e1|^2 = 1 when nothing moves
    assert cost(m, np.zeros(2), ErrorState([1, 0, 0, 0]), np.zeros(2), _params(pa=0)) == \
        pytest.approx(2.0)


def test_cost_fleet_term_scaling():
    m = discretize(0.2)
    e0 = ErrorState([1, 0, 0, 0])
    base = cost(m, np.zeros(2), e0, np.zeros(2), _params(pa=0, N=4))
    with_fleet = cost(m, np.zeros(2), e0, np.array([1.0, 2.0]), _params(pa=2.0, N=4))
    assert with_fleet - base == pytest.approx(2.0 / 4 * 5.0)


def test_cost_params_validation():
    with pytest.raises(ValueError):
        _params(R=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        _params(pa=-1)
    with pytest.raises(ValueError):
        _params(N=0)


def _benchmark_params(N=4, pa=1.0):
    m = discretize(0.2)
    Q, R = 5 * I4, 2 * I2
    P = solve_dare(m.Ad, m.Bd, Q, R)
    return m, CostParams(Q=Q, R=R, P=P, beta=1.5, pa=pa, po=np.zeros(2), N=N)


def test_gradient_zero_at_unconstrained_optimum():
    m, params = _benchmark_params(N=1, pa=0.0)
    game = LocalGame(m, ErrorState([1, -0.5, 0.2, 0.1]), [0, 0], params, 3)
    u_star = np.linalg.solve(game.Hq, -game.f)
    np.testing.assert_allclose(game.pseudo_gradient(u_star, game.phi(u_star)), 0, atol=1e-10)


def test_gradient_finite_difference_local_terms():
    m, params = _benchmark_params(pa=0.0)
    e0 = ErrorState([0.4, -1.0, 0.3, 0.0])
    u = np.random.default_rng(5).uniform(-2, 2, 6)
    sigma = np.array([0.1, 0.2])
    h = 1e-6
    fd = [(cost(m, u + h * d, e0, sigma, params) - cost(m, u - h * d, e0, sigma, params)) / (2 * h)
          for d in np.eye(6)]
    np.testing.assert_allclose(pseudo_gradient(m, u, e0, sigma, params), fd, rtol=1e-6, atol=1e-6)


def test_gradient_finite_difference_through_aggregate():
    """With the true aggregate, the pseudo-gradient is the partial derivative of J_i in u_i."""
    m, params = _benchmark_params()
    rng = np.random.default_rng(9)
    us = rng.uniform(-2, 2, size=(4, 6))
    e0s = [ErrorState(rng.normal(size=4)) for _ in range(4)]
    targets = rng.normal(size=(4, 2))

    def J(u0):
        all_u = us.copy()
        all_u[0] = u0
        return cost(m, u0, e0s[0], sigma_true(m, all_u, e0s, targets), params, targets[0])

    h = 1e-6
    fd = [(J(us[0] + h * d) - J(us[0] - h * d)) / (2 * h) for d in np.eye(6)]
    grad = pseudo_gradient(m, us[0], e0s[0], sigma_true(m, us, e0s, targets), params, targets[0])
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-5)


def test_project_box_examples():
    np.testing.assert_array_equal(project_box([3.0, -0.5, -7.0], 2.0), [2.0, -0.5, -2.0])


@settings(max_examples=50)
@given(arrays(float, 6, elements=st.floats(-10, 10)))
def test_project_box_is_nearest_grid_point(v):
    """Projection beats every point of a grid over the box."""
    grid = np.linspace(-2, 2, 41)
    p = project_box(v, 2.0)
    best = np.array([grid[np.argmin(np.abs(grid - x))] for x in v])
    assert np.linalg.norm(v - p) <= np.linalg.norm(v - best) + 1e-12


@given(arrays(float, 6, elements=st.floats(-10, 10)), arrays(float, 6, elements=st.floats(-10, 10)))
def test_project_box_idempotent_nonexpansive(a, b):
    pa = project_box(a, 2.0)
    np.testing.assert_array_equal(project_box(pa, 2.0), pa)
    assert np.linalg.norm(pa - project_box(b, 2.0)) <= np.linalg.norm(a - b) + 1e-12


@given(arrays(float, 6, elements=st.floats(-2, 2)), arrays(float, 6, elements=st.floats(-2, 2)))
def test_cost_midpoint_convex(u1, u2):
    m, params = _benchmark_params()
    game = LocalGame(m, ErrorState([1, 0.5, 0, -0.2]), [0, 0], params, 3)
    sigma = np.array([0.2, -0.1])
    mid = game.cost((u1 + u2) / 2, sigma)
    assert mid <= (game.cost(u1, sigma) + game.cost(u2, sigma)) / 2 + 1e-9
