"""Model-predictive control over a dynamics oracle.

An oracle maps a batch of states and actions to next states.  Trajectories
are propagated by expectation: for an ensemble the next state is the state
plus the member-averaged predicted mean change.  Sequences whose rollout
leaves the finite reals score ``-inf`` and are never selected.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import env as cartpole
from . import kernels


class Oracle(Protocol):
    def next_states(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray: ...


class CartpoleReward:
    """Vectorized cartpole reward usable by both model and true-dynamics rollouts."""

    def __init__(self, params: cartpole.CartpoleParams):
        self.params = params
        self._packed = params.packed()

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        a = actions.reshape(actions.shape[0], -1)[:, 0]
        return kernels.reward_py(states[:, 0], states[:, 2], a, self._packed)


class TrueDynamicsOracle:
    """The analytic cartpole itself; rollouts through it are exact."""

    def __init__(self, params: cartpole.CartpoleParams):
        self.params = params
        self._packed = params.packed()

    def next_states(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return kernels.step_batch(states, actions.reshape(states.shape[0], -1)[:, 0], self._packed)

    def sequence_returns(self, s0, actions, reward_fn):
        if not isinstance(reward_fn, CartpoleReward):
            return None
        p = self._packed.copy()
        rp = reward_fn.params
        p[kernels.P_X_GOAL] = rp.x_goal
        p[kernels.P_LENGTHSCALE] = rp.reward_lengthscale
        p[kernels.P_ACTION_PENALTY] = rp.action_penalty
        return kernels.sequence_returns(s0, actions[:, :, 0], p)


class FunctionOracle:
    """Wraps ``fn(states, actions) -> next_states``; handy for toy problems."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.fn = fn

    def next_states(self, states, actions):
        return self.fn(states, actions)


@dataclass
class PlannerConfig:
    method: str = "cem"
    horizon: int = 25
    n_candidates: int = 400
    n_elites: int = 40
    cem_iterations: int = 5
    alpha: float = 0.1
    action_low: float = -1.0
    action_high: float = 1.0
    init_std: float | None = None  # defaults to half the bound width
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("cem", "random"):
            raise ValueError(f"unknown planner method {self.method!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 1 <= self.n_elites <= self.n_candidates:
            raise ValueError("need 1 <= n_elites <= n_candidates")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not self.action_low < self.action_high:
            raise ValueError("action_low must be below action_high")

    @classmethod
    def random_shooting(cls, **overrides) -> "PlannerConfig":
        base = dict(method="random", horizon=25, n_candidates=2000, n_elites=1)
        base.update(overrides)
        return cls(**base)

    @property
    def std0(self) -> float:
        if self.init_std is not None:
            return float(self.init_std)
        return 0.5 * (self.action_high - self.action_low)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActionPlan:
    actions: np.ndarray  # (T, d_a)
    predicted_return: float
    elite_mean_history: list = field(default_factory=list)
    best_return_history: list = field(default_factory=list)
    n_diverged: int = 0


def evaluate_sequences(oracle, s0: np.ndarray, actions: np.ndarray, reward_fn) -> np.ndarray:
    """Returns of ``actions`` (N, T, d_a) from ``s0`` under expectation propagation."""
    s0 = np.asarray(s0, dtype=np.float64).reshape(-1)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = actions[:, :, None]
    fast = getattr(oracle, "sequence_returns", None)
    if fast is not None:
        out = fast(s0, actions, reward_fn)
        if out is not None:
            return out
    n, horizon, _ = actions.shape
    states = np.repeat(s0[None, :], n, axis=0)
    total = np.zeros(n)
    with np.errstate(all="ignore"):
        for t in range(horizon):
            states = np.asarray(oracle.next_states(states, actions[:, t, :]), dtype=np.float64)
            total += reward_fn(states, actions[:, t, :])
        ok = np.isfinite(total) & np.all(np.isfinite(states), axis=1)
    return np.where(ok, total, -np.inf)


def evaluate_sequence(oracle, s0, actions, reward_fn) -> float:
    """Return of a single (T, d_a) action sequence; ``-inf`` when the rollout diverges."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1:
        actions = actions[:, None]
    return float(evaluate_sequences(oracle, s0, actions[None], reward_fn)[0])


def _initial_mean(config: PlannerConfig, d_a: int, warm_mean) -> np.ndarray:
    if warm_mean is not None:
        return np.clip(np.asarray(warm_mean, dtype=np.float64).reshape(config.horizon, d_a),
                       config.action_low, config.action_high)
    return np.full((config.horizon, d_a), 0.5 * (config.action_low + config.action_high))


def plan_cem(oracle, s0, config: PlannerConfig, reward_fn, warm_mean=None, rng=None, d_a: int = 1) -> ActionPlan:
    """Cross-entropy method over open-loop action sequences."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    mean = _initial_mean(config, d_a, warm_mean)
    std = np.full_like(mean, config.std0)
    history, best_hist = [], []
    best = -math.inf
    n_diverged = 0
    for _ in range(config.cem_iterations):
        noise = rng.standard_normal((config.n_candidates,) + mean.shape)
        candidates = np.clip(mean + std * noise, config.action_low, config.action_high)
        returns = evaluate_sequences(oracle, s0, candidates, reward_fn)
        finite = np.isfinite(returns)
        n_diverged += int(np.count_nonzero(~finite))
        if not finite.any():
            raise RuntimeError("model diverges from s0")
        order = np.argsort(-returns, kind="stable")[: config.n_elites]
        elites = candidates[order]
        best = max(best, float(returns[order[0]]))
        best_hist.append(best)
        elite_mean = elites.mean(axis=0)
        elite_std = elites.std(axis=0)
        mean = config.alpha * mean + (1.0 - config.alpha) * elite_mean
        std = config.alpha * std + (1.0 - config.alpha) * elite_std
        history.append(elite_mean.copy())
    mean = np.clip(mean, config.action_low, config.action_high)
    ret = evaluate_sequence(oracle, s0, mean, reward_fn)
    return ActionPlan(actions=mean, predicted_return=ret, elite_mean_history=history,
                      best_return_history=best_hist, n_diverged=n_diverged)


def plan_random(oracle, s0, config: PlannerConfig, reward_fn, rng=None, d_a: int = 1) -> ActionPlan:
    """Random shooting: best of ``n_candidates`` uniform sequences."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    candidates = rng.uniform(config.action_low, config.action_high,
                             size=(config.n_candidates, config.horizon, d_a))
    returns = evaluate_sequences(oracle, s0, candidates, reward_fn)
    finite = np.isfinite(returns)
    if not finite.any():
        raise RuntimeError("model diverges from s0")
    best = int(np.argmax(returns))
    return ActionPlan(actions=candidates[best], predicted_return=float(returns[best]),
                      best_return_history=[float(returns[best])],
                      n_diverged=int(np.count_nonzero(~finite)))


def plan(oracle, s0, config: PlannerConfig, reward_fn, warm_mean=None, rng=None, d_a: int = 1) -> ActionPlan:
    if config.method == "cem":
        return plan_cem(oracle, s0, config, reward_fn, warm_mean=warm_mean, rng=rng, d_a=d_a)
    return plan_random(oracle, s0, config, reward_fn, rng=rng, d_a=d_a)


class MPCPolicy:
    """Receding-horizon controller: replan every step, execute the first action.

    With ``warm_start`` the CEM mean is initialized from the previous plan
    shifted by one step, padded with the bound midpoint.
    """

    def __init__(self, oracle, config: PlannerConfig, reward_fn, seed=None, d_a: int = 1):
        self.oracle = oracle
        self.config = config
        self.reward_fn = reward_fn
        self.d_a = d_a
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self._prev: np.ndarray | None = None
        self.plans: list[ActionPlan] = []
        self.keep_plans = False

    def reset(self, seed=None) -> None:
        self._prev = None
        self.plans = []
        if seed is not None:
            self.rng = np.random.default_rng(seed)

    def __call__(self, state) -> float:
        warm = None
        if self.config.warm_start and self._prev is not None:
            mid = 0.5 * (self.config.action_low + self.config.action_high)
            warm = np.concatenate([self._prev[1:], np.full((1, self.d_a), mid)], axis=0)
        result = plan(self.oracle, state, self.config, self.reward_fn, warm_mean=warm, rng=self.rng, d_a=self.d_a)
        self._prev = result.actions
        if self.keep_plans:
            self.plans.append(result)
        return float(result.actions[0, 0]) if self.d_a == 1 else result.actions[0]


def mpc_policy(oracle, config: PlannerConfig, reward_fn, seed=None) -> MPCPolicy:
    return MPCPolicy(oracle, config, reward_fn, seed=seed)
