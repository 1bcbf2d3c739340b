"""Experiment configuration: a YAML tree mapped onto typed sections.

Unknown keys are rejected with their dotted path.  Command-line overrides
use the same dotted paths (``model.width=64``) with YAML-parsed values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .adversarial import AttackConfig
from .env import CartpoleParams
from .model import ModelConfig
from .planner import PlannerConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DataSection:
    slices: int = 7
    n_samples: int = 200000
    n_trials: int = 12
    horizon: int = 200
    expert_threshold: float = 0.0
    babble_rollouts: int = 20
    babble_horizon: int = 10
    epsilon: float = 2.0
    S: int = 1000
    pool_size: int = 10**6
    metric: str = "point"
    expert: str | None = None  # dataset CSV used as the distance reference


@dataclass
class PetsSection:
    n_trials: int = 20
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    initial_random_episodes: int = 1
    horizon: int = 200
    train_fraction: float = 0.9
    training_type: str = "full"


@dataclass
class SweepSection:
    checkpoints: list = field(default_factory=list)  # checkpoint files or directories
    datasets: dict = field(default_factory=dict)  # tag -> dataset CSV
    n_eval: int = 1
    rewards: str | None = None  # run-pets records CSV supplying measured rewards


@dataclass
class EpochCurveSection:
    train: str | None = None
    validation: dict = field(default_factory=dict)
    eval_every: int = 5
    n_eval: int = 1
    epochs: int | None = None


@dataclass
class AttackSection:
    checkpoint: str | None = None
    validation: str | None = None


@dataclass
class HeatmapSection:
    S: list = field(default_factory=lambda: [30, 100, 300, 1000])
    epsilon: list = field(default_factory=lambda: [0.5, 2.0, 8.0])
    n_seeds: int = 5
    pool_size: int = 10**6
    expert: str | None = None
    n_eval: int = 1


@dataclass
class BabbleSection:
    extra_transitions: list = field(default_factory=lambda: [200, 20000])
    n_seeds: int = 5
    n_trials: int = 10
    horizon: int = 10


@dataclass
class GoalSection:
    checkpoints: list = field(default_factory=list)
    goals: list = field(default_factory=lambda: [-1.0, -0.1, 0.1, 1.0])
    n_eval: int = 1


@dataclass
class CompareSection:
    checkpoint_a: str | None = None
    checkpoint_b: str | None = None
    expert: str | None = None  # dataset CSV; the first episode's states are used


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str | None = None
    env: CartpoleParams = field(default_factory=CartpoleParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    data: DataSection = field(default_factory=DataSection)
    pets: PetsSection = field(default_factory=PetsSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    epoch_curve: EpochCurveSection = field(default_factory=EpochCurveSection)
    attack_inputs: AttackSection = field(default_factory=AttackSection)
    heatmap: HeatmapSection = field(default_factory=HeatmapSection)
    babble: BabbleSection = field(default_factory=BabbleSection)
    goal: GoalSection = field(default_factory=GoalSection)
    compare: CompareSection = field(default_factory=CompareSection)


def _build(cls, tree: Any, path: str):
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(path, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(sub, "unknown key")
        if dataclasses.is_dataclass(_default_of(fields[key])):
            kwargs[key] = _build(type(_default_of(fields[key])), value, sub)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _default_of(f: dataclasses.Field):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return f.default


def to_tree(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = to_tree(v) if dataclasses.is_dataclass(v) else v
    return out


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            tree = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("", f"cannot parse {p}: {exc}") from exc
    tree = apply_overrides(tree, list(overrides or []))
    return _build(ExperimentConfig, tree, "")


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_tree(cfg), sort_keys=True), encoding="utf-8")
    return path
