"""Analytic swing-up cartpole.

Frictionless cart-pole integrated with RK4 over ``substeps`` sub-intervals.
Theta is measured from upright and wrapped to (-pi, pi].  The reward is a
Gaussian kernel on the distance from the pole tip to the target tip position
minus a quadratic action penalty.

Convention shared with the planner: the reward of step ``t`` is
``reward(s_{t+1}, a_t)``, i.e. it scores the state the action leads to.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import kernels

STATE_DIM = 4
ACTION_DIM = 1


@dataclass(frozen=True)
class CartpoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "CartpoleState":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.3  # half-length
    gravity: float = 9.81
    force_scale: float = 10.0
    dt: float = 0.05
    substeps: int = 4
    x_goal: float = 0.0
    reward_lengthscale: float = 0.6
    action_penalty: float = 0.01
    reset_std: float = 0.01

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "dt", "reward_lengthscale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        if self.reset_std < 0:
            raise ValueError("reset_std must be non-negative")

    def packed(self) -> np.ndarray:
        """Parameter vector in the layout expected by :mod:`mismatch.kernels`."""
        return np.array(
            [
                self.cart_mass,
                self.pole_mass,
                self.pole_length,
                self.gravity,
                self.force_scale,
                self.dt,
                float(int(self.substeps)),
                self.x_goal,
                self.reward_lengthscale,
                self.action_penalty,
            ],
            dtype=np.float64,
        )

    def with_goal(self, x_goal: float) -> "CartpoleParams":
        return replace(self, x_goal=float(x_goal))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeResult:
    states: np.ndarray  # (T+1, 4)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    total_reward: float

    def __len__(self) -> int:
        return len(self.actions)

    def state(self, t: int) -> CartpoleState:
        return CartpoleState.from_array(self.states[t])


Policy = Callable[[np.ndarray], float]


def _as_vector(state) -> np.ndarray:
    if isinstance(state, CartpoleState):
        return state.as_array()
    return np.asarray(state, dtype=np.float64).reshape(-1)


def step_array(state: np.ndarray, action: float, params: CartpoleParams) -> np.ndarray:
    s = _as_vector(state)
    if s.shape != (STATE_DIM,) or not np.all(np.isfinite(s)):
        raise ValueError("invalid state")
    a = float(np.asarray(action).reshape(-1)[0])
    if not math.isfinite(a):
        raise ValueError("invalid action")
    return kernels.step_batch(s[None, :], np.array([a]), params.packed())[0]


def step(state: CartpoleState, action: float, params: CartpoleParams) -> CartpoleState:
    """Advance one control interval ``dt``; the caller clamps ``action`` to [-1, 1]."""
    return CartpoleState.from_array(step_array(state, action, params))


def reward(state, action: float, params: CartpoleParams) -> float:
    s = _as_vector(state)
    a = float(np.asarray(action).reshape(-1)[0])
    return float(kernels.reward_py(s[0], s[2], a, params.packed()))


def batch_reward(states: np.ndarray, actions: np.ndarray, params: CartpoleParams) -> np.ndarray:
    """Vectorized reward for ``states`` (N, 4) and ``actions`` (N,) or (N, 1)."""
    states = np.asarray(states)
    actions = np.asarray(actions).reshape(states.shape[0], -1)[:, 0]
    return kernels.reward_py(states[:, 0], states[:, 2], actions, params.packed())


def reset(seed, params: CartpoleParams) -> CartpoleState:
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=STATE_DIM) * params.reset_std
    s = np.array([0.0, 0.0, math.pi, 0.0]) + noise
    s[2] = kernels.wrap_angle_py(s[2])
    return CartpoleState.from_array(s)


def rollout(
    policy: Policy,
    horizon: int,
    seed,
    params: CartpoleParams,
    initial_state: CartpoleState | None = None,
) -> EpisodeResult:
    """Reset with ``seed`` (or start from ``initial_state``) and run ``policy`` for ``horizon`` steps.

    The policy receives the state as a length-4 array and returns a scalar
    action; it is clamped to [-1, 1] before being applied.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    packed = params.packed()
    states = np.empty((horizon + 1, STATE_DIM))
    actions = np.empty(horizon)
    rewards = np.empty(horizon)
    s = (initial_state or reset(seed, params)).as_array()
    states[0] = s
    for t in range(horizon):
        raw = policy(s.copy())
        a = float(np.asarray(raw, dtype=np.float64).reshape(-1)[0])
        if not math.isfinite(a):
            raise ValueError(f"policy returned a non-finite action at step {t}")
        a = min(1.0, max(-1.0, a))
        s = kernels.step_batch(s[None, :], np.array([a]), packed)[0]
        states[t + 1] = s
        actions[t] = a
        rewards[t] = kernels.reward_py(s[0], s[2], a, packed)
    return EpisodeResult(states=states, actions=actions, rewards=rewards, total_reward=float(np.sum(rewards)))


def mechanical_energy(state, params: CartpoleParams) -> float:
    """Total energy of the cart and uniform-rod pole, zero at rest with the pole horizontal."""
    x, x_dot, theta, theta_dot = _as_vector(state)
    m, M, l = params.pole_mass, params.cart_mass, params.pole_length
    kinetic = 0.5 * (M + m) * x_dot**2 + m * l * math.cos(theta) * x_dot * theta_dot
    kinetic += 0.5 * (4.0 / 3.0) * m * l**2 * theta_dot**2
    return kinetic + m * params.gravity * l * math.cos(theta)
