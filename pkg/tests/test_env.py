import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from mismatch import env, kernels

P = env.CartpoleParams()


def lagrangian_rhs(params, force):
    """Cartpole ODE from the mass-matrix form of the Euler-Lagrange equations."""
    M, m, l, g = params.cart_mass, params.pole_mass, params.pole_length, params.gravity

    def rhs(_, y):
        x, xd, th, thd = y
        A = np.array([[M + m, m * l * math.cos(th)], [m * l * math.cos(th), 4.0 / 3.0 * m * l * l]])
        rhs_vec = np.array([force + m * l * thd * thd * math.sin(th), m * g * l * math.sin(th)])
        xdd, thdd = np.linalg.solve(A, rhs_vec)
        return [xd, xdd, thd, thdd]

    return rhs


def oracle_step(state, action, params=P):
    sol = solve_ivp(lagrangian_rhs(params, action * params.force_scale), (0.0, params.dt), state,
                    method="DOP853", rtol=1e-12, atol=1e-12)
    out = sol.y[:, -1].copy()
    out[2] = math.atan2(math.sin(out[2]), math.cos(out[2]))
    return out


def test_upright_equilibrium_is_fixed():
    assert np.array_equal(env.step_array(np.zeros(4), 0.0, P), np.zeros(4))


def test_hanging_equilibrium_is_fixed():
    out = env.step_array(np.array([0.0, 0.0, math.pi, 0.0]), 0.0, P)
    # sin(pi) is 1.2e-16 in floating point, not 0
    np.testing.assert_allclose(out[[0, 1, 3]], 0.0, atol=1e-15)
    assert abs(abs(out[2]) - math.pi) < 1e-15


def test_small_tilt_falls_further_and_matches_oracle():
    s = np.array([0.0, 0.0, 0.1, 0.0])
    out = env.step_array(s, 0.0, P)
    assert out[2] > 0.1
    np.testing.assert_allclose(out, oracle_step(s, 0.0), rtol=1e-6, atol=1e-9)


@given(st.floats(-2, 2), st.floats(-3, 3), st.floats(-math.pi, math.pi), st.floats(-4, 4), st.floats(-1, 1))
def test_step_matches_independent_integrator(x, xd, th, thd, a):
    s = np.array([x, xd, th, thd])
    got = env.step_array(s, a, P)
    want = oracle_step(s, a)
    np.testing.assert_allclose(got[[0, 1, 3]], want[[0, 1, 3]], rtol=1e-6, atol=1e-6)
    assert abs(kernels.wrap_angle_py(got[2] - want[2])) < 1e-6


def test_energy_drift_below_tenth_percent():
    s = np.array([0.0, 0.0, 2.0, 0.0])
    e0 = env.mechanical_energy(s, P)
    ref = abs(e0) + P.pole_mass * P.gravity * P.pole_length
    for _ in range(200):
        s = env.step_array(s, 0.0, P)
    assert abs(env.mechanical_energy(s, P) - e0) / ref < 1e-3


def test_reward_examples():
    assert env.reward(np.zeros(4), 0.0, P) == 1.0
    assert env.reward(np.zeros(4), 1.0, P) == pytest.approx(0.99, abs=1e-15)
    assert env.reward(np.array([0.0, 0.0, math.pi, 0.0]), 0.0, P) == pytest.approx(math.exp(-4), rel=1e-12)


def test_reward_goal_shift():
    p = P.with_goal(1.0)
    assert env.reward(np.array([1.0, 0.0, 0.0, 0.0]), 0.0, p) == 1.0
    assert env.reward(np.zeros(4), 0.0, p) == pytest.approx(math.exp(-1 / 0.36), rel=1e-12)


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range_and_equivalence(theta):
    w = kernels.wrap_angle_py(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)


def test_reset_seeded_and_noise_free():
    assert env.reset(3, P) == env.reset(3, P)
    s = env.reset(3, env.CartpoleParams(reset_std=0.0))
    assert s.as_array().tolist() == [0.0, 0.0, math.pi, 0.0]


def test_reset_theta_std():
    th = np.array([env.reset(i, P).theta for i in range(1000)])
    dev = np.array([kernels.wrap_angle_py(t - math.pi) for t in th])
    assert 0.008 <= dev.std(ddof=1) <= 0.012


def test_rollout_zero_policy_hangs():
    ep = env.rollout(lambda s: 0.0, 200, 0, P)
    assert ep.total_reward == pytest.approx(200 * math.exp(-4), rel=0.05)
    assert ep.states.shape == (201, 4) and ep.rewards.shape == (200,)


def test_rollout_horizon_one_and_clamp():
    ep = env.rollout(lambda s: 5.0, 1, 0, P)
    assert len(ep.rewards) == 1 and ep.actions[0] == 1.0


def test_rollout_rejects_nonfinite_action():
    with pytest.raises(ValueError, match="non-finite action at step 2"):
        env.rollout(lambda s, c=iter([0.0, 0.0, float("nan")]): next(c), 5, 0, P)


def test_step_rejects_invalid_state():
    with pytest.raises(ValueError, match="invalid state"):
        env.step(env.CartpoleState(float("nan"), 0, 0, 0), 0.0, P)


def test_params_validation():
    with pytest.raises(ValueError):
        env.CartpoleParams(pole_mass=0.0)
