import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from mismatch import env as cartpole
from mismatch import planner as pl

LQ_PENALTY = 0.1


def lq_oracle():
    return pl.FunctionOracle(lambda s, a: s + a.reshape(s.shape))


def lq_reward(states, actions):
    return -states[:, 0] ** 2 - LQ_PENALTY * actions.reshape(len(states), -1)[:, 0] ** 2


def lq_return(actions, s0):
    s, total = s0, 0.0
    for a in actions:
        s = s + a
        total += -s * s - LQ_PENALTY * a * a
    return total


def test_cem_solves_linear_quadratic_toy():
    s0, T = 2.5, 6
    # bounded convex problem; L-BFGS-B gives the reference optimum
    ref = minimize(lambda a: -lq_return(a, s0), np.zeros(T), bounds=[(-1, 1)] * T, method="L-BFGS-B", tol=1e-12)
    cfg = pl.PlannerConfig(horizon=T, n_candidates=500, n_elites=50, cem_iterations=12, seed=0)
    plan = pl.plan_cem(lq_oracle(), np.array([s0]), cfg, lq_reward)
    assert plan.predicted_return == pytest.approx(lq_return(plan.actions[:, 0], s0), rel=1e-12)
    assert plan.predicted_return >= -ref.fun - 1e-3
    np.testing.assert_allclose(plan.actions[:, 0], ref.x, atol=0.05)


def test_random_shooting_returns_argmax():
    cfg = pl.PlannerConfig.random_shooting(horizon=4, n_candidates=300, seed=5)
    s0 = np.array([1.0])
    plan = pl.plan_random(lq_oracle(), s0, cfg, lq_reward)
    cands = np.random.default_rng(5).uniform(-1, 1, size=(300, 4, 1))
    brute = [lq_return(c[:, 0], 1.0) for c in cands]
    np.testing.assert_array_equal(plan.actions, cands[int(np.argmax(brute))])
    assert plan.predicted_return == pytest.approx(max(brute), rel=1e-12)


def test_diverging_sequences_never_selected():
    def fn(s, a):
        out = s + a.reshape(s.shape)
        out[a.reshape(-1) > 0] = np.nan
        return out

    cfg = pl.PlannerConfig(horizon=3, n_candidates=200, n_elites=20, cem_iterations=3)
    plan = pl.plan_cem(pl.FunctionOracle(fn), np.array([-2.0]), cfg, lq_reward)
    assert np.all(plan.actions <= 0) and plan.n_diverged > 0
    rets = pl.evaluate_sequences(pl.FunctionOracle(fn), np.array([0.0]), np.array([[[0.5]], [[-0.5]]]), lq_reward)
    assert rets[0] == -np.inf and np.isfinite(rets[1])


def test_everything_diverges_raises():
    oracle = pl.FunctionOracle(lambda s, a: np.full_like(s, np.inf))
    for cfg in (pl.PlannerConfig(horizon=2, n_candidates=10, n_elites=2),
                pl.PlannerConfig.random_shooting(horizon=2, n_candidates=10)):
        with pytest.raises(RuntimeError, match="diverges"):
            pl.plan(oracle, np.zeros(1), cfg, lq_reward)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_best_return_history_non_decreasing(seed, s0):
    cfg = pl.PlannerConfig(horizon=5, n_candidates=40, n_elites=5, cem_iterations=6, seed=seed)
    hist = pl.plan_cem(lq_oracle(), np.array([s0]), cfg, lq_reward).best_return_history
    assert all(b >= a for a, b in zip(hist, hist[1:]))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_plans_respect_bounds(seed, s0):
    cfg = pl.PlannerConfig(horizon=5, n_candidates=40, n_elites=5, cem_iterations=3, seed=seed,
                           action_low=-0.3, action_high=0.7)
    plan = pl.plan_cem(lq_oracle(), np.array([s0]), cfg, lq_reward)
    assert np.all(plan.actions >= -0.3) and np.all(plan.actions <= 0.7)


def test_fast_path_matches_stepping():
    params = cartpole.CartpoleParams()
    oracle = pl.TrueDynamicsOracle(params)
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, size=(16, 10, 1))
    s0 = np.array([0.1, 0.0, 3.0, 0.2])
    fast = pl.evaluate_sequences(oracle, s0, actions, pl.CartpoleReward(params))
    slow = pl.evaluate_sequences(pl.FunctionOracle(oracle.next_states), s0, actions, pl.CartpoleReward(params))
    np.testing.assert_allclose(fast, slow, rtol=1e-12)
    for k in range(3):
        state = cartpole.CartpoleState.from_array(s0)
        total = 0.0
        for a in actions[k, :, 0]:
            state = cartpole.step(state, a, params)
            total += cartpole.reward(state, a, params)
        assert fast[k] == pytest.approx(total, rel=1e-12)


def test_reward_function_matches_env():
    params = cartpole.CartpoleParams(x_goal=0.4)
    rng = np.random.default_rng(1)
    s = rng.normal(size=(20, 4))
    a = rng.uniform(-1, 1, 20)
    np.testing.assert_allclose(pl.CartpoleReward(params)(s, a[:, None]), cartpole.batch_reward(s, a, params))


def test_mpc_policy_seeded_and_warm_started():
    params = cartpole.CartpoleParams()
    cfg = pl.PlannerConfig(horizon=8, n_candidates=50, n_elites=5, cem_iterations=2)
    runs = []
    for _ in range(2):
        pol = pl.MPCPolicy(pl.TrueDynamicsOracle(params), cfg, pl.CartpoleReward(params), seed=3)
        pol.keep_plans = True
        runs.append(cartpole.rollout(pol, 5, 0, params))
    np.testing.assert_array_equal(runs[0].states, runs[1].states)
    assert len(pol.plans) == 5
    pol.reset(seed=3)
    assert pol.plans == [] and pol._prev is None


def test_mpc_on_true_dynamics_gains_reward():
    params = cartpole.CartpoleParams()
    cfg = pl.PlannerConfig(horizon=25, n_candidates=200, n_elites=20, cem_iterations=4)
    pol = pl.MPCPolicy(pl.TrueDynamicsOracle(params), cfg, pl.CartpoleReward(params), seed=0)
    assert cartpole.rollout(pol, 100, 0, params).total_reward > 30


def test_config_validation():
    for bad in (dict(method="x"), dict(horizon=0), dict(n_elites=0), dict(n_elites=500),
                dict(alpha=1.0), dict(action_low=1.0, action_high=1.0)):
        with pytest.raises(ValueError):
            pl.PlannerConfig(**bad)
    assert pl.PlannerConfig(action_low=-2, action_high=2).std0 == 2.0
