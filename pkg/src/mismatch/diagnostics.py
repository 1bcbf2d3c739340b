"""Experiment harnesses: the PETS loop and the likelihood/reward studies built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import data as ds
from . import env as cartpole
from . import model as dm
from . import planner as mpc
from .records import RecordStore, parallel_map, write_csv

HIST_LO, HIST_HI, HIST_WIDTH = -3.0, 3.0, 0.1


@dataclass
class ExperimentRecord:
    model_id: str
    trial_index: int
    ll_per_dataset: dict
    mean_reward: float
    reward_per_episode: list
    val_nll: float = math.nan

    def to_dict(self) -> dict:
        return dict(model_id=self.model_id, trial_index=self.trial_index, ll_per_dataset=dict(self.ll_per_dataset),
                    mean_reward=self.mean_reward, reward_per_episode=list(self.reward_per_episode),
                    val_nll=self.val_nll)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(d["model_id"], int(d["trial_index"]), dict(d["ll_per_dataset"]), float(d["mean_reward"]),
                   [float(r) for r in d["reward_per_episode"]], float(d.get("val_nll", math.nan)))


@dataclass
class CorrelationReport:
    dataset: str
    n: int
    pearson_rho: float
    points: list  # (ll, reward)
    model_ids: list = field(default_factory=list)


@dataclass
class HeatmapCell:
    S: int
    epsilon: float
    reweighted: str
    mean_reward: float
    rewards: list
    seeds: list

    @property
    def empty(self) -> bool:
        return not self.rewards

    @property
    def median_reward(self) -> float:
        return float(np.median(self.rewards)) if self.rewards else math.nan


def pearson(points) -> float:
    """Sample Pearson correlation of (x, y) pairs, computed with centered sums."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ValueError("pearson needs at least 3 (x, y) points")
    x = arr[:, 0] - arr[:, 0].mean()
    y = arr[:, 1] - arr[:, 1].mean()
    sxx, syy = float(x @ x), float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("degenerate sample")
    return float(np.clip((x @ y) / math.sqrt(sxx * syy), -1.0, 1.0))


def _child_seed(seed, *path) -> int:
    return int(np.random.SeedSequence([int(seed), *[int(p) for p in path]]).generate_state(1)[0])


def evaluate_policy_reward(model, params: cartpole.CartpoleParams, planner_config: mpc.PlannerConfig,
                           n_eval: int, seed, horizon: int = 200, keep_states: bool = False):
    """Mean reward of ``n_eval`` MPC episodes through ``model`` (or the true dynamics when ``None``)."""
    oracle = mpc.TrueDynamicsOracle(params) if model is None else model
    reward_fn = mpc.CartpoleReward(params)
    rewards, states = [], []
    for k in range(n_eval):
        ep_seed = _child_seed(seed, k)
        policy = mpc.mpc_policy(oracle, planner_config, reward_fn, seed=ep_seed)
        ep = cartpole.rollout(policy, horizon, ep_seed, params)
        rewards.append(ep.total_reward)
        if keep_states:
            states.append(ep.states)
    if keep_states:
        return rewards, states
    return rewards


def calibrate_reward_ceiling(params: cartpole.CartpoleParams | None = None, planner_config=None,
                             n_seeds: int = 20, seed=0, horizon: int = 200, workers: int = 1):
    """R*: median return of the true-dynamics CEM planner over ``n_seeds`` episodes."""
    params = params or cartpole.CartpoleParams()
    planner_config = planner_config or mpc.PlannerConfig()
    rewards = parallel_map(partial(_true_episode, params, planner_config, seed, horizon), range(n_seeds), workers)
    return float(np.median(rewards)), rewards


def _true_episode(params, planner_config, seed, horizon, k):
    return evaluate_policy_reward(None, params, planner_config, 1, _child_seed(seed, k), horizon)[0]


# --- the PETS loop --------------------------------------------------------------


@dataclass
class PetsRun:
    seed: int
    records: list
    checkpoints: list
    dataset: ds.TransitionSet
    episodes: list

    def rewards(self) -> np.ndarray:
        return np.array([r.mean_reward for r in self.records])

    def val_nll(self) -> np.ndarray:
        return np.array([r.val_nll for r in self.records])


def run_pets(
    n_trials: int,
    params: cartpole.CartpoleParams | None = None,
    model_config: dm.ModelConfig | None = None,
    planner_config: mpc.PlannerConfig | None = None,
    initial_random_episodes: int = 1,
    seed=0,
    horizon: int = 200,
    train_fraction: float = 0.9,
    training_type: str = "full",
    initial_data: ds.TransitionSet | None = None,
    extra_data: ds.TransitionSet | None = None,
    out_dir=None,
) -> PetsRun:
    """Learn a model, control with MPC, aggregate data; once per trial.

    Each trial trains on a ``train_fraction`` split of all data so far and
    records the held-out likelihood alongside the episode reward.  When
    ``out_dir`` is given, every trial's checkpoint is written there.
    ``initial_data`` replaces the random episodes; ``extra_data`` is added
    to them.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    params = params or cartpole.CartpoleParams()
    model_config = model_config or dm.ModelConfig()
    planner_config = planner_config or mpc.PlannerConfig()
    cfg = dm.ModelConfig(**{**model_config.to_dict(), "seed": _child_seed(seed, 1)})
    model = dm.DynamicsModel(cfg)
    reward_fn = mpc.CartpoleReward(params)

    if initial_data is not None:
        dataset = initial_data
    else:
        dataset = ds.collect_on_policy(ds.RandomPolicy(_child_seed(seed, 2)), initial_random_episodes, horizon,
                                       _child_seed(seed, 3), params, provenance="babble")
    if extra_data is not None:
        dataset = ds.TransitionSet.concat([dataset, extra_data], provenance=dataset.provenance)
    next_episode = int(dataset.episode_id.max()) + 1 if dataset.has_episodes else 0
    records, checkpoints, episodes = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    for trial in range(n_trials):
        try:
            train_set, held_out = ds.split(dataset, train_fraction, _child_seed(seed, 4, trial))
            history = dm.train(model, train_set, held_out, mode=training_type)
            ll = dm.evaluate_ll(model, held_out).mean
            ep_seed = _child_seed(seed, 5, trial)
            policy = mpc.mpc_policy(model, planner_config, reward_fn, seed=ep_seed)
            ep = cartpole.rollout(policy, horizon, ep_seed, params)
        except Exception as exc:
            raise RuntimeError(f"PETS trial {trial} (seed {seed}) failed: {exc}") from exc
        model_id = f"s{seed}-t{trial:03d}"
        records.append(ExperimentRecord(model_id, trial, {"heldout": ll}, ep.total_reward, [ep.total_reward],
                                        val_nll=float(history.val_loss[-1]) if history.val_loss else -ll))
        snapshot = model.copy()
        checkpoints.append(snapshot)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            dm.save_checkpoint(snapshot, out / f"{model_id}.ckpt")
        episodes.append(ep)
        dataset = ds.TransitionSet.concat([dataset, ds.TransitionSet.from_episodes([ep], "on-policy", next_episode)],
                                          provenance="on-policy")
        next_episode += 1
    return PetsRun(seed=int(seed), records=records, checkpoints=checkpoints, dataset=dataset, episodes=episodes)


def on_policy_tail(run: PetsRun, n_transitions: int | None = None) -> ds.TransitionSet:
    """On-policy transitions from the end of a run (the MPC episodes, newest last)."""
    on = ds.TransitionSet.from_episodes(run.episodes, "on-policy")
    if n_transitions is None or n_transitions >= len(on):
        return on
    return on.subset(np.arange(len(on) - n_transitions, len(on)))


PETS_HEADER = ["seed", "trial", "model_id", "reward", "heldout_ll", "val_nll"]


def pets_rows(runs: Sequence[PetsRun]):
    for run in runs:
        for r in run.records:
            yield [run.seed, r.trial_index, r.model_id, r.mean_reward, r.ll_per_dataset["heldout"], r.val_nll]


def trials_to_threshold(rewards: Sequence[float], threshold: float) -> int:
    """Index of the first trial reaching ``threshold``; ``len(rewards)`` when never reached."""
    for i, r in enumerate(rewards):
        if r >= threshold:
            return i
    return len(rewards)


# --- likelihood vs reward -------------------------------------------------------


def _ll_statistic(model, data: ds.TransitionSet, batching: str, batch_size: int = 64) -> float:
    if batching == "trajectory" and data.has_episodes:
        return dm.evaluate_ll(model, data, "trajectory", batch_size).mean_of_batch_means
    return dm.evaluate_ll(model, data, "random", batch_size).mean


def _checkpoint_rewards(params, planner_config, n_eval, seed, item):
    model_id, model = item
    return evaluate_policy_reward(model, params, planner_config, n_eval, seed)


def ll_reward_sweep(
    checkpoints: Sequence[tuple[str, dm.DynamicsModel]],
    datasets: Mapping[str, ds.TransitionSet],
    params: cartpole.CartpoleParams | None = None,
    planner_config: mpc.PlannerConfig | None = None,
    n_eval: int = 10,
    batching: str = "random",
    seed=0,
    rewards: Mapping[str, Sequence[float]] | None = None,
    workers: int = 1,
):
    """LL on every dataset and mean MPC reward for every checkpoint; one report per dataset.

    ``rewards`` may supply already-measured episode rewards per model id; only
    checkpoints missing from it are evaluated.  In trajectory batching the LL
    statistic is the mean over per-trajectory-chunk means (sets without
    episode structure fall back to the pooled mean).
    """
    if len(checkpoints) < 3:
        raise ValueError("need at least 3 checkpoints")
    params = params or cartpole.CartpoleParams()
    planner_config = planner_config or mpc.PlannerConfig()
    known = dict(rewards or {})
    todo = [(mid, m) for mid, m in checkpoints if mid not in known]
    measured = parallel_map(partial(_checkpoint_rewards, params, planner_config, n_eval, seed), todo, workers)
    known.update({mid: r for (mid, _), r in zip(todo, measured)})

    records, rows = [], []
    for mid, model in checkpoints:
        lls = {tag: _ll_statistic(model, d, batching) for tag, d in datasets.items()}
        rew = [float(r) for r in known[mid]]
        records.append(ExperimentRecord(mid, -1, lls, float(np.mean(rew)), rew))
        for tag in datasets:
            rows.append([mid, tag, lls[tag], float(np.mean(rew))])
    reports = {}
    for tag in datasets:
        pts = [(r.ll_per_dataset[tag], r.mean_reward) for r in records]
        reports[tag] = CorrelationReport(tag, len(pts), pearson(pts), pts, [r.model_id for r in records])
    return reports, records, rows


SWEEP_HEADER = ["model_id", "dataset", "ll", "mean_reward"]


# --- per-epoch curves -------------------------------------------------------------


def epoch_reward_curve(
    model_config: dm.ModelConfig,
    train_set: ds.TransitionSet,
    val_sets: Mapping[str, ds.TransitionSet],
    params: cartpole.CartpoleParams | None = None,
    planner_config: mpc.PlannerConfig | None = None,
    eval_every: int = 1,
    n_eval: int = 1,
    seed=0,
    epochs: int | None = None,
    weights: dm.WeightSpec | None = None,
):
    """Train once, re-evaluating controller reward and per-set validation loss every ``eval_every`` epochs."""
    if eval_every < 1:
        raise ValueError("eval_every must be >= 1")
    params = params or cartpole.CartpoleParams()
    planner_config = planner_config or mpc.PlannerConfig()
    model = dm.DynamicsModel(model_config)
    total = epochs if epochs is not None else model_config.epochs_full
    rows = []
    losses: list[float] = []

    def callback(epoch, snapshot):
        if (epoch + 1) % eval_every and epoch + 1 != total:
            return
        val = {tag: dm.validation_loss(snapshot, d) for tag, d in val_sets.items()}
        rew = evaluate_policy_reward(snapshot, params, planner_config, n_eval, _child_seed(seed, epoch)) if n_eval else []
        rows.append({"epoch": epoch + 1, "val": val, "rewards": rew,
                     "mean_reward": float(np.mean(rew)) if rew else math.nan})

    history = dm.train(model, train_set, None, weights=weights, callbacks=[callback], epochs=total)
    losses = history.train_loss
    for row in rows:
        row["train_loss"] = losses[row["epoch"] - 1]
    return rows, history


def epoch_curve_table(rows, tags: Sequence[str]):
    header = ["epoch", "train_loss"] + [f"val_{t}" for t in tags] + ["mean_reward"]
    body = [[r["epoch"], r["train_loss"]] + [r["val"][t] for t in tags] + [r["mean_reward"]] for r in rows]
    return header, body


# --- re-weighting heatmap ------------------------------------------------------------


def _heatmap_unit(pool: ds.DistancePool, model_config, planner_config, params, seed, n_eval, unit):
    S, eps, arm, k = unit
    if pool.survivors(eps).size < S:
        return None
    train_set = pool.select(eps, S, _child_seed(seed, 11, S, int(round(eps * 1e6)), k))
    weights = None
    if arm == "distance":
        weights = dm.WeightSpec("distance")
    elif arm == "reward":
        weights = dm.WeightSpec("reward")
    cfg = dm.ModelConfig(**{**model_config.to_dict(), "seed": _child_seed(seed, 12, k)})
    model = dm.DynamicsModel(cfg)
    dm.train(model, train_set, None, weights=weights, reward_fn=mpc.CartpoleReward(params))
    rewards = evaluate_policy_reward(model, params, planner_config, n_eval, _child_seed(seed, 13, k))
    return float(np.mean(rewards))


def reweight_heatmap(
    S_grid: Sequence[int],
    eps_grid: Sequence[float],
    pool: ds.DistancePool,
    reweighted: str = "distance",
    n_seeds: int = 5,
    model_config: dm.ModelConfig | None = None,
    planner_config: mpc.PlannerConfig | None = None,
    params: cartpole.CartpoleParams | None = None,
    seed=0,
    n_eval: int = 1,
    workers: int = 1,
    store: RecordStore | None = None,
) -> list[HeatmapCell]:
    """Mean MPC reward of models trained on distance-filtered sets over an (S, epsilon) grid.

    ``reweighted`` is ``"none"``, ``"distance"`` or ``"reward"``.  Seed ``k``
    of a cell draws the same subsample for every arm.  Cells with too few
    survivors come back empty.
    """
    if not S_grid or not eps_grid:
        raise ValueError("grids must be nonempty")
    if reweighted is True:
        reweighted = "distance"
    elif reweighted is False:
        reweighted = "none"
    params = params or cartpole.CartpoleParams()
    model_config = model_config or dm.ModelConfig()
    planner_config = planner_config or mpc.PlannerConfig()
    units = [(int(S), float(e), reweighted, k) for S in S_grid for e in eps_grid for k in range(n_seeds)]
    fn = partial(_heatmap_unit, pool, model_config, planner_config, params, seed, n_eval)
    results = _resumable_map(fn, units, workers, store, lambda u: f"heatmap:{u[0]}:{u[1]!r}:{u[2]}:{u[3]}")
    cells = []
    for S in S_grid:
        for e in eps_grid:
            got = [(k, r) for (uS, ue, _, k), r in zip(units, results) if uS == int(S) and ue == float(e)]
            rewards = [r for _, r in got if r is not None]
            seeds = [k for k, r in got if r is not None]
            cells.append(HeatmapCell(int(S), float(e), reweighted, float(np.mean(rewards)) if rewards else math.nan,
                                     rewards, seeds))
    return cells


HEATMAP_HEADER = ["S", "epsilon", "reweighted", "mean_reward", "median_reward", "n", "rewards"]


def heatmap_rows(cells: Sequence[HeatmapCell]):
    for c in cells:
        yield [c.S, c.epsilon, c.reweighted, "" if c.empty else c.mean_reward, "" if c.empty else c.median_reward,
               len(c.rewards), " ".join(repr(float(r)) for r in c.rewards)]


def _resumable_map(fn, units, workers, store, key):
    if store is None:
        return parallel_map(fn, units, workers)
    todo = [u for u in units if key(u) not in store]
    for u, r in zip(todo, parallel_map(fn, todo, workers)):
        store.append(key(u), r)
    return [store.get(key(u)) for u in units]


# --- plan comparison ------------------------------------------------------------------


def compare_plans(model_a, model_b, expert_states: np.ndarray, planner_config: mpc.PlannerConfig | None = None,
                  params: cartpole.CartpoleParams | None = None, seed=0):
    """Plan from every expert state with both models under identical seeds.

    Returns one row per state: step, predicted returns, first actions, the
    maximum absolute action difference and both full action sequences.
    """
    params = params or cartpole.CartpoleParams()
    planner_config = planner_config or mpc.PlannerConfig()
    if model_a is not None and model_b is not None and (model_a.d_s, model_a.d_a) != (model_b.d_s, model_b.d_a):
        raise ValueError("models must share state and action dimensions")
    reward_fn = mpc.CartpoleReward(params)
    rows = []
    for t, s in enumerate(np.asarray(expert_states)):
        plans = []
        for m in (model_a, model_b):
            oracle = mpc.TrueDynamicsOracle(params) if m is None else m
            rng = np.random.default_rng(_child_seed(seed, t))
            plans.append(mpc.plan(oracle, s, planner_config, reward_fn, rng=rng))
        a, b = plans
        rows.append({
            "step": t, "return_a": a.predicted_return, "return_b": b.predicted_return,
            "action_a": float(a.actions[0, 0]), "action_b": float(b.actions[0, 0]),
            "max_abs_diff": float(np.max(np.abs(a.actions - b.actions))),
            "actions_a": a.actions[:, 0].copy(), "actions_b": b.actions[:, 0].copy(),
        })
    return rows


def compare_plans_table(rows):
    T = len(rows[0]["actions_a"]) if rows else 0
    header = ["step", "return_a", "return_b", "action_a", "action_b", "max_abs_diff"]
    header += [f"a{t}" for t in range(T)] + [f"b{t}" for t in range(T)]
    body = [[r["step"], r["return_a"], r["return_b"], r["action_a"], r["action_b"], r["max_abs_diff"],
             *r["actions_a"], *r["actions_b"]] for r in rows]
    return header, body


# --- babbling study ---------------------------------------------------------------------


def _babble_unit(kwargs, unit):
    count, k = unit
    seed = _child_seed(kwargs["seed"], 21, k)
    params = kwargs["params"]
    horizon = kwargs["babble_horizon"]
    babble = ds.collect_babble(-(-count // horizon), horizon=horizon, seed=_child_seed(seed, 1), params=params)
    babble = babble.subset(np.arange(count))
    run = run_pets(kwargs["n_trials"], params, kwargs["model_config"], kwargs["planner_config"],
                   seed=seed, extra_data=babble)
    return [float(r) for r in run.rewards()]


def babble_study(extra_counts: Sequence[int], n_seeds: int = 5, n_trials: int = 10,
                 params: cartpole.CartpoleParams | None = None, model_config: dm.ModelConfig | None = None,
                 planner_config: mpc.PlannerConfig | None = None, seed=0, babble_horizon: int = 10,
                 workers: int = 1, store: RecordStore | None = None):
    """PETS learning curves with ``count`` extra random-action transitions from the zero state.

    The extra data comes from rollouts of ``babble_horizon`` steps, truncated
    to exactly ``count`` transitions.  Seed ``k`` shares its PETS seed across
    counts.  Returns ``{count: [per-seed list of per-trial rewards]}``.
    """
    if any(c < 1 for c in extra_counts):
        raise ValueError("counts must be >= 1")
    kwargs = dict(seed=seed, params=params or cartpole.CartpoleParams(), n_trials=n_trials,
                  model_config=model_config or dm.ModelConfig(), planner_config=planner_config or mpc.PlannerConfig(),
                  babble_horizon=babble_horizon)
    units = [(int(c), k) for c in extra_counts for k in range(n_seeds)]
    results = _resumable_map(partial(_babble_unit, kwargs), units, workers, store, lambda u: f"babble:{u[0]}:{u[1]}")
    out: dict[int, list] = {int(c): [] for c in extra_counts}
    for (c, _), curve in zip(units, results):
        out[c].append(curve)
    return out


# --- goal generalization ------------------------------------------------------------------


def x_histogram(xs: np.ndarray) -> np.ndarray:
    n_bins = int(round((HIST_HI - HIST_LO) / HIST_WIDTH))
    edges = np.linspace(HIST_LO, HIST_HI, n_bins + 1)
    counts, _ = np.histogram(np.clip(xs, HIST_LO, HIST_HI), bins=edges)
    return counts


def _goal_unit(params, planner_config, n_eval, seed, unit):
    label, model, goal = unit
    rewards, states = evaluate_policy_reward(model, params.with_goal(goal), planner_config, n_eval,
                                             _child_seed(seed, 31), keep_states=True)
    xs = np.concatenate([s[:, 0] for s in states])
    return rewards, x_histogram(xs).tolist()


def goal_generalization(checkpoints: Sequence[tuple[str, dm.DynamicsModel]], goals: Sequence[float],
                        params: cartpole.CartpoleParams | None = None,
                        planner_config: mpc.PlannerConfig | None = None, n_eval: int = 1, seed=0,
                        workers: int = 1):
    """MPC reward for every (checkpoint, goal) and histograms of visited cart positions.

    Returns rows of ``{"checkpoint", "goal", "mean_reward", "rewards", "histogram"}``.
    """
    goals = [float(g) for g in goals]
    if not all(math.isfinite(g) for g in goals):
        raise ValueError("goals must be finite")
    params = params or cartpole.CartpoleParams()
    planner_config = planner_config or mpc.PlannerConfig()
    units = [(label, m, g) for label, m in checkpoints for g in goals]
    results = parallel_map(partial(_goal_unit, params, planner_config, n_eval, seed), units, workers)
    return [{"checkpoint": label, "goal": g, "rewards": rew, "mean_reward": float(np.mean(rew)), "histogram": hist}
            for (label, _, g), (rew, hist) in zip(units, results)]


def central_mass(histogram: Sequence[int], radius: float = 0.5) -> float:
    """Fraction of histogram counts in bins lying entirely within ``|x| < radius``."""
    counts = np.asarray(histogram, dtype=np.float64)
    edges = np.linspace(HIST_LO, HIST_HI, counts.size + 1)
    inside = (edges[:-1] >= -radius - 1e-12) & (edges[1:] <= radius + 1e-12)
    total = counts.sum()
    return float(counts[inside].sum() / total) if total else 0.0


def goal_rows(rows):
    header = ["checkpoint", "goal", "mean_reward", "rewards"] + [
        f"h{i}" for i in range(len(rows[0]["histogram"]) if rows else 0)]
    body = [[r["checkpoint"], r["goal"], r["mean_reward"], " ".join(repr(float(x)) for x in r["rewards"]),
             *r["histogram"]] for r in rows]
    return header, body


def save_table(path, header, body) -> Path:
    return write_csv(path, header, body)
