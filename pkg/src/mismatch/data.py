"""Transition datasets: generators, distance filtering, splitting, batching, CSV I/O."""

from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import env as cartpole
from . import kernels

PROVENANCES = ("grid", "sampled", "on-policy", "expert", "filtered", "babble")

# x, x_dot, theta, theta_dot, action
DEFAULT_BOUNDS = ((-3.0, 3.0), (-8.0, 8.0), (-math.pi, math.pi), (-8.0, 8.0), (-1.0, 1.0))
DEFAULT_GRID_CAP = 10**7
_CHUNK = 65536


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    episode_id: int | None = None
    step_index: int | None = None
    dstar: float | None = None


class TransitionSet:
    """Array-backed ordered collection of transitions.

    Missing episode ids / step indices are stored as -1, a missing ``d*`` as NaN.
    """

    def __init__(self, s, a, s_next, episode_id=None, step_index=None, dstar=None,
                 provenance: str = "sampled", meta: dict | None = None):
        self.s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        self.a = np.asarray(a, dtype=np.float64).reshape(self.s.shape[0], -1)
        self.s_next = np.asarray(s_next, dtype=np.float64).reshape(self.s.shape)
        n = self.s.shape[0]
        self.episode_id = np.full(n, -1, np.int64) if episode_id is None else np.asarray(episode_id, np.int64).reshape(n)
        self.step_index = np.full(n, -1, np.int64) if step_index is None else np.asarray(step_index, np.int64).reshape(n)
        self.dstar = np.full(n, np.nan) if dstar is None else np.asarray(dstar, np.float64).reshape(n)
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self.provenance = provenance
        self.meta = dict(meta or {})
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.s_next))):
            raise ValueError("transitions must be finite")

    # --- container protocol ---------------------------------------------------

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            i = int(idx)
            return Transition(
                s=self.s[i].copy(), a=self.a[i].copy(), s_next=self.s_next[i].copy(),
                episode_id=None if self.episode_id[i] < 0 else int(self.episode_id[i]),
                step_index=None if self.step_index[i] < 0 else int(self.step_index[i]),
                dstar=None if np.isnan(self.dstar[i]) else float(self.dstar[i]),
            )
        return self.subset(idx)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionSet):
            return NotImplemented
        return (
            self.s.shape == other.s.shape and self.a.shape == other.a.shape
            and np.array_equal(self.s, other.s) and np.array_equal(self.a, other.a)
            and np.array_equal(self.s_next, other.s_next)
            and np.array_equal(self.episode_id, other.episode_id)
            and np.array_equal(self.step_index, other.step_index)
            and np.array_equal(self.dstar, other.dstar, equal_nan=True)
        )

    def __repr__(self) -> str:
        return f"TransitionSet(n={len(self)}, d_s={self.d_s}, d_a={self.d_a}, provenance={self.provenance!r})"

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    @property
    def d_s(self) -> int:
        return self.s.shape[1]

    @property
    def d_a(self) -> int:
        return self.a.shape[1]

    @property
    def has_episodes(self) -> bool:
        return len(self) > 0 and bool(np.all(self.episode_id >= 0))

    @property
    def has_dstar(self) -> bool:
        return len(self) > 0 and not np.any(np.isnan(self.dstar))

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    def subset(self, idx, provenance: str | None = None) -> "TransitionSet":
        idx = np.arange(len(self))[idx] if isinstance(idx, slice) else np.asarray(idx)
        return TransitionSet(self.s[idx], self.a[idx], self.s_next[idx], self.episode_id[idx],
                             self.step_index[idx], self.dstar[idx], provenance or self.provenance, self.meta)

    def episode_indices(self) -> list[np.ndarray]:
        """Index arrays of each episode, in first-appearance order, sorted by step index."""
        if not self.has_episodes:
            raise ValueError("set has no episode structure")
        _, first = np.unique(self.episode_id, return_index=True)
        out = []
        for eid in self.episode_id[np.sort(first)]:
            idx = np.flatnonzero(self.episode_id == eid)
            out.append(idx[np.argsort(self.step_index[idx], kind="stable")])
        return out

    @classmethod
    def concat(cls, sets: Sequence["TransitionSet"], provenance: str | None = None) -> "TransitionSet":
        sets = [t for t in sets if len(t)]
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([t.s for t in sets]), np.concatenate([t.a for t in sets]),
            np.concatenate([t.s_next for t in sets]), np.concatenate([t.episode_id for t in sets]),
            np.concatenate([t.step_index for t in sets]), np.concatenate([t.dstar for t in sets]),
            provenance or sets[0].provenance,
        )

    @classmethod
    def from_episodes(cls, episodes: Iterable[cartpole.EpisodeResult], provenance: str,
                      first_episode_id: int = 0) -> "TransitionSet":
        s, a, sn, eid, step = [], [], [], [], []
        for k, ep in enumerate(episodes):
            n = len(ep.actions)
            s.append(ep.states[:-1])
            sn.append(ep.states[1:])
            a.append(np.asarray(ep.actions).reshape(n, -1))
            eid.append(np.full(n, first_episode_id + k))
            step.append(np.arange(n))
        return cls(np.concatenate(s), np.concatenate(a), np.concatenate(sn),
                   np.concatenate(eid), np.concatenate(step), provenance=provenance)


class Normalizer:
    """Per-dimension z-scoring with a floor on the standard deviation."""

    FLOOR = 1e-8

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64).copy()
        self.std = np.maximum(np.asarray(std, dtype=np.float64), self.FLOOR)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), x.std(axis=0))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    def __eq__(self, other):
        return isinstance(other, Normalizer) and np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


# --- generators ---------------------------------------------------------------


def _complete(inputs: np.ndarray, params: cartpole.CartpoleParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = inputs[:, : cartpole.STATE_DIM]
    a = inputs[:, cartpole.STATE_DIM :]
    s_next = kernels.step_batch(s, a[:, 0], params.packed())
    return s, a, s_next


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 2 or not np.all(b[:, 0] < b[:, 1]):
        raise ValueError("bounds must be a sequence of (lo, hi) pairs with lo < hi")
    if b.shape[0] != cartpole.STATE_DIM + cartpole.ACTION_DIM:
        raise ValueError(f"expected {cartpole.STATE_DIM + cartpole.ACTION_DIM} bound pairs, got {b.shape[0]}")
    return b


def grid_points(bounds, slices_per_dim: int, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
    """Cartesian product of ``slices_per_dim`` evenly spaced values per dimension."""
    b = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if slices_per_dim < 2:
        raise ValueError("slices_per_dim must be >= 2")
    if not np.all(b[:, 0] < b[:, 1]):
        raise ValueError("every bound needs lo < hi")
    size = slices_per_dim ** b.shape[0]
    if size > cap:
        raise ValueError(f"grid of {size} points exceeds cap {cap}")
    axes = [np.linspace(lo, hi, slices_per_dim) for lo, hi in b]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def generate_grid(bounds=DEFAULT_BOUNDS, slices_per_dim: int = 7, params: cartpole.CartpoleParams | None = None,
                  cap: int = DEFAULT_GRID_CAP) -> TransitionSet:
    params = params or cartpole.CartpoleParams()
    _check_bounds(bounds)
    s, a, s_next = _complete(grid_points(bounds, slices_per_dim, cap), params)
    return TransitionSet(s, a, s_next, provenance="grid")


def uniform_inputs(bounds, n: int, seed) -> np.ndarray:
    """``n`` uniform (s, a) rows drawn in fixed-size chunks with per-chunk RNG streams."""
    b = np.asarray(bounds, dtype=np.float64)
    n_chunks = max(1, math.ceil(n / _CHUNK))
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    out = np.empty((n, b.shape[0]))
    for k, ss in enumerate(streams):
        lo, hi = k * _CHUNK, min(n, (k + 1) * _CHUNK)
        out[lo:hi] = np.random.default_rng(ss).uniform(b[:, 0], b[:, 1], size=(hi - lo, b.shape[0]))
    return out


def generate_sampled(bounds=DEFAULT_BOUNDS, n: int = 200000, seed=0,
                     params: cartpole.CartpoleParams | None = None) -> TransitionSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or cartpole.CartpoleParams()
    b = _check_bounds(bounds)
    s, a, s_next = _complete(uniform_inputs(b, n, seed), params)
    return TransitionSet(s, a, s_next, provenance="sampled")


def episode_seeds(seed, n: int) -> list[int]:
    """Independent reset seeds for ``n`` episodes derived from ``seed``."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def collect_on_policy(agent: Callable, n_trials: int, horizon: int = 200, seed=0,
                      params: cartpole.CartpoleParams | None = None, provenance: str = "on-policy",
                      initial_state: cartpole.CartpoleState | None = None) -> TransitionSet:
    """Run ``agent`` for ``n_trials`` episodes; ``agent.reset(seed)`` is called per episode when present."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    params = params or cartpole.CartpoleParams()
    episodes = []
    for k, ep_seed in enumerate(episode_seeds(seed, n_trials)):
        if hasattr(agent, "reset"):
            agent.reset(ep_seed)
        episodes.append(cartpole.rollout(agent, horizon, ep_seed, params, initial_state=initial_state))
    out = TransitionSet.from_episodes(episodes, provenance)
    out.meta["episode_rewards"] = [ep.total_reward for ep in episodes]
    return out


class RandomPolicy:
    """Uniform random actions in [-1, 1]."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)

    def __call__(self, state):
        return float(self.rng.uniform(-1.0, 1.0))


def collect_babble(n_rollouts: int, horizon: int = 10, seed=0,
                   params: cartpole.CartpoleParams | None = None) -> TransitionSet:
    """Random-action rollouts that always start from the zero state."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    zero = cartpole.CartpoleState(0.0, 0.0, 0.0, 0.0)
    return collect_on_policy(RandomPolicy(seed), n_rollouts, horizon, seed, params,
                             provenance="babble", initial_state=zero)


def collect_expert(horizon: int = 200, n_trials: int = 12, reward_threshold: float = 0.0, seed=0,
                   params: cartpole.CartpoleParams | None = None, planner_config=None,
                   max_attempts: int | None = None) -> TransitionSet:
    """Episodes from CEM planning through the true dynamics, keeping those above ``reward_threshold``."""
    from . import planner

    params = params or cartpole.CartpoleParams()
    config = planner_config or planner.PlannerConfig()
    max_attempts = max_attempts or 3 * n_trials
    oracle = planner.TrueDynamicsOracle(params)
    reward_fn = planner.CartpoleReward(params)
    kept, best = [], -math.inf
    for attempt, ep_seed in enumerate(episode_seeds(seed, max_attempts)):
        policy = planner.mpc_policy(oracle, config, reward_fn, seed=ep_seed)
        ep = cartpole.rollout(policy, horizon, ep_seed, params)
        best = max(best, ep.total_reward)
        if ep.total_reward > reward_threshold:
            kept.append(ep)
            if len(kept) == n_trials:
                break
    if len(kept) < n_trials:
        raise RuntimeError(
            f"only {len(kept)} of {n_trials} expert episodes exceeded {reward_threshold:.3f} "
            f"after {max_attempts} attempts (best reward {best:.3f})"
        )
    out = TransitionSet.from_episodes(kept, "expert")
    out.meta["episode_rewards"] = [ep.total_reward for ep in kept]
    return out


# --- distance to the expert trajectory -----------------------------------------


def distances_to_expert(points: np.ndarray, expert: TransitionSet, normalizer: Normalizer | None = None,
                        metric: str = "point") -> np.ndarray:
    """Minimum distance from each (s, a) row to the expert set in normalized space.

    ``metric="point"`` uses the nearest expert element; ``metric="segment"`` the
    nearest segment joining consecutive elements of an expert episode.
    """
    if len(expert) == 0:
        raise ValueError("expert set is empty")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ref = expert.inputs
    if points.shape[1] != ref.shape[1]:
        raise ValueError(f"dimension mismatch: point has {points.shape[1]}, expert has {ref.shape[1]}")
    normalizer = normalizer or Normalizer.fit(ref)
    zp = normalizer.transform(points)
    zr = normalizer.transform(ref)
    if metric == "point":
        return kernels.min_distance(zp, zr)
    if metric == "segment":
        starts, ends = [], []
        for idx in (expert.episode_indices() if expert.has_episodes else [np.arange(len(expert))]):
            if len(idx) == 1:
                starts.append(zr[idx])
                ends.append(zr[idx])
            else:
                starts.append(zr[idx[:-1]])
                ends.append(zr[idx[1:]])
        return kernels.min_segment_distance(zp, np.concatenate(starts), np.concatenate(ends))
    raise ValueError(f"unknown metric {metric!r}")


def min_distance_to_expert(point, expert: TransitionSet, normalizer: Normalizer | None = None,
                           metric: str = "point") -> float:
    return float(distances_to_expert(np.asarray(point, dtype=np.float64).reshape(1, -1), expert, normalizer, metric)[0])


@dataclass
class DistanceFilterSpec:
    expert: TransitionSet
    epsilon: float
    S: int
    pool_size: int = 10**6
    seed: int = 0
    metric: str = "point"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 1 <= self.S <= self.pool_size:
            raise ValueError("need 1 <= S <= pool_size")


@dataclass
class DistancePool:
    """Uniform (s, a) pool with each row's distance to the expert; reusable across (S, epsilon)."""

    inputs: np.ndarray
    dstar: np.ndarray
    params: cartpole.CartpoleParams = field(default_factory=cartpole.CartpoleParams)

    @classmethod
    def build(cls, expert: TransitionSet, bounds=DEFAULT_BOUNDS, pool_size: int = 10**6, seed=0,
              params: cartpole.CartpoleParams | None = None, metric: str = "point") -> "DistancePool":
        b = _check_bounds(bounds)
        inputs = uniform_inputs(b, pool_size, seed)
        return cls(inputs, distances_to_expert(inputs, expert, metric=metric), params or cartpole.CartpoleParams())

    def survivors(self, epsilon: float) -> np.ndarray:
        return np.flatnonzero(self.dstar <= epsilon)

    def select(self, epsilon: float, S: int, seed) -> TransitionSet:
        keep = self.survivors(epsilon)
        if keep.size < S:
            raise ValueError(f"only {keep.size} pool points within epsilon={epsilon} (need {S})")
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(keep, size=S, replace=False))
        s, a, s_next = _complete(self.inputs[chosen], self.params)
        return TransitionSet(s, a, s_next, dstar=self.dstar[chosen], provenance="filtered",
                             meta={"epsilon": epsilon, "S": S})


def filter_by_distance(spec: DistanceFilterSpec, bounds=DEFAULT_BOUNDS,
                       params: cartpole.CartpoleParams | None = None) -> TransitionSet:
    pool = DistancePool.build(spec.expert, bounds, spec.pool_size, spec.seed, params, spec.metric)
    sub_seed = np.random.SeedSequence(spec.seed).spawn(2)[1]
    return pool.select(spec.epsilon, spec.S, sub_seed)


# --- splitting and batching ------------------------------------------------------


def split(data: TransitionSet, train_fraction: float = 0.9, seed=0, mode: str = "random"):
    """Seeded partition into (train, test); ``mode="trajectory"`` keeps whole episodes together."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if mode == "random":
        n = len(data)
        n_train = int(round(train_fraction * n))
        n_train = min(max(n_train, 1), n - 1)
        if n < 2:
            raise ValueError("set too small to split")
        perm = rng.permutation(n)
        return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))
    if mode == "trajectory":
        episodes = data.episode_indices()
        if len(episodes) < 2:
            raise ValueError("set too small to split by episode")
        order = rng.permutation(len(episodes))
        k = min(max(int(round(train_fraction * len(episodes))), 1), len(episodes) - 1)
        train_idx = np.sort(np.concatenate([episodes[i] for i in order[:k]]))
        test_idx = np.sort(np.concatenate([episodes[i] for i in order[k:]]))
        return data.subset(train_idx), data.subset(test_idx)
    raise ValueError(f"unknown split mode {mode!r}")


def batch_indices(data: TransitionSet, batch_size: int, mode: str = "random", seed=0) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode == "random":
        perm = np.random.default_rng(seed).permutation(len(data))
        return [perm[i : i + batch_size] for i in range(0, len(data), batch_size)]
    if mode == "trajectory":
        if not data.has_episodes:
            raise ValueError("trajectory batching requires episode structure")
        out = []
        for idx in data.episode_indices():
            out.extend(idx[i : i + batch_size] for i in range(0, len(idx), batch_size))
        return out
    raise ValueError(f"unknown batching mode {mode!r}")


def batches(data: TransitionSet, batch_size: int, mode: str = "random", seed=0) -> list[TransitionSet]:
    return [data.subset(idx) for idx in batch_indices(data, batch_size, mode, seed)]


# --- persistence ------------------------------------------------------------------


def _columns(d_s: int, d_a: int) -> list[str]:
    return ([f"s{i}" for i in range(d_s)] + [f"a{i}" for i in range(d_a)]
            + [f"sn{i}" for i in range(d_s)] + ["episode_id", "step_index", "dstar"])


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        # mtime=0 keeps compressed output byte-reproducible
        raw = gzip.GzipFile(path, mode + "b", mtime=0)
        return io.TextIOWrapper(raw, encoding="utf-8", newline="")
    return open(path, mode, newline="", encoding="utf-8")


def save(data: TransitionSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_columns(data.d_s, data.d_a))
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.s[i]] + [repr(float(v)) for v in data.a[i]]
            row += [repr(float(v)) for v in data.s_next[i]]
            row.append("" if data.episode_id[i] < 0 else str(int(data.episode_id[i])))
            row.append("" if data.step_index[i] < 0 else str(int(data.step_index[i])))
            row.append("" if np.isnan(data.dstar[i]) else repr(float(data.dstar[i])))
            w.writerow(row)


def load(path, provenance: str = "sampled") -> TransitionSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: line 1: empty file")
        d_s = sum(1 for c in header if c.startswith("s") and c[1:].isdigit())
        d_a = sum(1 for c in header if c.startswith("a") and c[1:].isdigit())
        if header != _columns(d_s, d_a) or d_s == 0:
            raise ValueError(f"{path}: line 1: unexpected header")
        rows, eids, steps, dstars = [], [], [], []
        width = 2 * d_s + d_a
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 3:
                raise ValueError(f"{path}: line {lineno}: expected {width + 3} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:width]])
                eids.append(int(row[width]) if row[width] else -1)
                steps.append(int(row[width + 1]) if row[width + 1] else -1)
                dstars.append(float(row[width + 2]) if row[width + 2] else math.nan)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: line 2: no data rows")
    arr = np.asarray(rows)
    return TransitionSet(arr[:, :d_s], arr[:, d_s : d_s + d_a], arr[:, d_s + d_a :], eids, steps, dstars,
                         provenance=provenance)
