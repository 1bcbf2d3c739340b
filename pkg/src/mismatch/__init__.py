"""Objective-mismatch diagnostics for model-based reinforcement learning on cartpole."""

from .env import CartpoleParams, CartpoleState, reset, rollout, step
from .model import DynamicsModel, ModelConfig
from .planner import MPCPolicy, PlannerConfig

__version__ = "0.1.0"

__all__ = [
    "CartpoleParams",
    "CartpoleState",
    "DynamicsModel",
    "MPCPolicy",
    "ModelConfig",
    "PlannerConfig",
    "reset",
    "rollout",
    "step",
]
