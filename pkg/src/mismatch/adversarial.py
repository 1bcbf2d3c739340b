"""Likelihood-preserving reward attack on a dynamics model's output layer.

The search is a (mu/mu_w, lambda) CMA-ES over the final affine map only.
Fitness is the controller's mean reward plus a one-sided hinge penalty on
any validation log-likelihood drop beyond a tolerance, so lower is better.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from . import env as cartpole
from . import model as dm
from . import planner as mpc
from .data import TransitionSet
from .records import parallel_map, write_csv


@dataclass
class CMAConfig:
    popsize: int | None = None  # lambda; 4 + floor(3 ln n) when None
    parents: int | None = None  # mu; lambda // 2 when None
    sigma0: float = 0.3
    max_generations: int = 200
    covariance: str = "full"
    seed: int = 0
    sigma_floor: float = 1e-12
    target: float | None = None  # stop once the best fitness reaches this

    def __post_init__(self):
        if self.covariance not in ("full", "diagonal"):
            raise ValueError(f"unknown covariance mode {self.covariance!r}")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")
        if self.popsize is not None and self.popsize < 2:
            raise ValueError("popsize must be >= 2")
        if self.parents is not None and not 1 <= self.parents <= (self.popsize or 10**9):
            raise ValueError("need 1 <= parents <= popsize")
        if self.max_generations < 0:
            raise ValueError("max_generations must be >= 0")


@dataclass
class CMAResult:
    x: np.ndarray
    f: float
    history: list  # one dict per generation
    evaluations: int
    stop: str


class CMAES:
    """Ask/tell CMA-ES with cumulative step-size adaptation.

    ``full`` keeps the whole covariance with rank-one and rank-mu updates;
    ``diagonal`` is the separable variant with learning rates scaled by
    ``(n + 2) / 3``.
    """

    def __init__(self, x0, config: CMAConfig):
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        if x0.size < 1:
            raise ValueError("x0 must have at least one coordinate")
        n = x0.size
        self.n = n
        self.config = config
        self.full = config.covariance == "full"
        self.lam = config.popsize or 4 + int(3 * math.log(n))
        self.mu = config.parents or self.lam // 2
        if self.mu > self.lam:
            raise ValueError("parents cannot exceed popsize")
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / float(np.sum(self.weights**2))
        mueff = self.mueff

        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.cs = (mueff + 2) / (n + mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        if not self.full:
            scale = (n + 2) / 3
            self.c1 = min(1.0, self.c1 * scale)
            self.cmu = min(1 - self.c1, self.cmu * scale)
        self.damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.mean = x0.copy()
        self.sigma = float(config.sigma0)
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        if self.full:
            self.C = np.eye(n)
            self.B = np.eye(n)
            self.D = np.ones(n)
            self._eigen_gen = 0
        else:
            self.c = np.ones(n)
        self.rng = np.random.default_rng(config.seed)
        self.generation = 0
        self._y: np.ndarray | None = None

    def _update_eigen(self):
        self.C = np.triu(self.C) + np.triu(self.C, 1).T
        evals, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(evals, 1e-300))

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.lam, self.n))
        if self.full:
            y = (z * self.D) @ self.B.T
        else:
            y = z * np.sqrt(self.c)
        self._y = y
        return self.mean + self.sigma * y

    def _invsqrt_times(self, v: np.ndarray) -> np.ndarray:
        if self.full:
            return self.B @ ((self.B.T @ v) / self.D)
        return v / np.sqrt(self.c)

    def tell(self, fitness: Sequence[float]) -> None:
        f = np.asarray(fitness, dtype=np.float64)
        if f.shape != (self.lam,):
            raise ValueError("one fitness value per candidate expected")
        f = np.where(np.isfinite(f), f, np.inf)
        order = np.argsort(f, kind="stable")[: self.mu]
        y_sel = self._y[order]
        y_w = self.weights @ y_sel
        self.mean = self.mean + self.sigma * y_w
        self.generation += 1
        g = self.generation

        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * self._invsqrt_times(y_w)
        ps_norm = float(np.linalg.norm(self.ps))
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * g)) / self.chi_n < 1.4 + 2 / (self.n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y_w
        c_corr = (1 - hsig) * self.cc * (2 - self.cc)
        if self.full:
            rank_mu = (y_sel.T * self.weights) @ y_sel
            self.C = ((1 - self.c1 - self.cmu) * self.C + self.c1 * (np.outer(self.pc, self.pc) + c_corr * self.C)
                      + self.cmu * rank_mu)
            if g - self._eigen_gen >= max(1, int(self.lam / ((self.c1 + self.cmu) * self.n * 10))):
                self._eigen_gen = g
                self._update_eigen()
        else:
            rank_mu = self.weights @ (y_sel**2)
            self.c = (1 - self.c1 - self.cmu) * self.c + self.c1 * (self.pc**2 + c_corr * self.c) + self.cmu * rank_mu
        self.sigma *= math.exp(min(1.0, (self.cs / self.damps) * (ps_norm / self.chi_n - 1)))


def cma_es_minimize(objective: Callable[[np.ndarray], float], x0, config: CMAConfig | None = None,
                    evaluate: Callable[[np.ndarray], Sequence[float]] | None = None,
                    callback: Callable[[dict], None] | None = None) -> CMAResult:
    """Minimize ``objective`` from ``x0``.

    ``evaluate`` may replace the per-candidate loop with a batched (or
    parallel) evaluation of a whole population.  Non-finite values rank
    last; two consecutive generations without a single finite value abort.
    History records the best-so-far fitness, which never increases.
    """
    config = config or CMAConfig()
    es = CMAES(x0, config)
    evaluate = evaluate or (lambda xs: [objective(x) for x in xs])
    best_x = es.mean.copy()
    best_f = math.inf
    history: list[dict] = []
    stale = 0
    stop = "max_generations"
    evaluations = 0
    for gen in range(config.max_generations):
        xs = es.ask()
        f = np.asarray(evaluate(xs), dtype=np.float64)
        evaluations += len(xs)
        finite = np.isfinite(f)
        if not finite.any():
            stale += 1
            if stale >= 2:
                raise RuntimeError("objective non-finite for the entire population twice in a row")
        else:
            stale = 0
            i = int(np.argmin(np.where(finite, f, np.inf)))
            if f[i] < best_f:
                best_f, best_x = float(f[i]), xs[i].copy()
        es.tell(f)
        entry = {"generation": gen, "best_fitness": best_f,
                 "generation_best": float(np.min(np.where(finite, f, np.inf))), "sigma": es.sigma}
        history.append(entry)
        if callback is not None:
            callback(entry)
        if es.sigma < config.sigma_floor:
            stop = "sigma"
            break
        if config.target is not None and entry["best_fitness"] <= config.target:
            stop = "target"
            break
    return CMAResult(x=best_x, f=best_f, history=history, evaluations=evaluations, stop=stop)


# --- the attack ---------------------------------------------------------------------


@dataclass
class AttackConfig:
    population: int = 16
    parents: int | None = None
    sigma0: float | None = None  # 0.05 * std of the output-layer weights when None
    max_generations: int = 300
    trials_per_eval: int = 5
    ll_penalty_coeff: float | None = None  # 1e3 * reward scale when None
    ll_tolerance: float = 0.05
    seed: int = 0
    covariance: str = "diagonal"
    horizon: int = 200
    screen_ll: bool = True
    basis: str = "validation"
    basis_floor: float = 1e-5
    logvar_scale: float = 0.05
    target_fraction: float | None = None  # stop once fitness <= target_fraction * baseline reward
    workers: int = 1

    def __post_init__(self):
        if self.parents is not None and self.parents < 1:
            raise ValueError("parents must be >= 1")
        if self.sigma0 is not None and not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")
        if self.trials_per_eval < 1:
            raise ValueError("trials_per_eval must be >= 1")
        if self.ll_tolerance < 0:
            raise ValueError("ll_tolerance must be >= 0")
        if self.covariance not in ("full", "diagonal"):
            raise ValueError(f"unknown covariance mode {self.covariance!r}")
        if self.basis not in ("identity", "validation"):
            raise ValueError(f"unknown search basis {self.basis!r}")
        if not 0 < self.basis_floor <= 1:
            raise ValueError("basis_floor must lie in (0, 1]")

    def penalty_coeff(self) -> float:
        return float(self.ll_penalty_coeff) if self.ll_penalty_coeff is not None else 1e3 * self.horizon

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    baseline_reward: float
    baseline_ll: float
    final_reward: float
    final_ll: float
    history: list
    model: dm.DynamicsModel
    success: bool
    evaluations: int = 0
    vector: np.ndarray | None = field(default=None, repr=False)


class SearchBasis:
    """Linear map from search coordinates to an output-layer perturbation.

    ``identity`` searches the raw parameters.  ``validation`` whitens each
    member's output map by the SVD of its validation-set hidden features
    ``[H, 1] = U S V^T``: coordinate ``y`` moves the parameters by
    ``V diag(1 / max(S, floor * S_max)) y``, scaled per output column by the
    model's median predicted std (mean head) or ``logvar_scale``.  A
    unit step therefore shifts validation predictions by about the same
    amount in every direction, and directions the validation data hardly
    constrains get proportionally larger parameter moves.
    """

    def __init__(self, model: dm.DynamicsModel, val_set: TransitionSet | None = None, kind: str = "identity",
                 floor: float = 1e-5, logvar_scale: float = 0.05):
        W, b = model.layers[-1]
        self.kind = kind
        self.shape = (W.shape[0], W.shape[1] + 1, W.shape[2])  # (E, width + 1, out)
        self.size = W.size + b.size
        if kind == "identity":
            return
        H = model.hidden_features(val_set.s, val_set.a)
        pred = model.predict(val_set.s, val_set.a)
        sd = np.median(np.exp(0.5 * pred.logvars), axis=1)  # (E, d_s)
        self.maps = []
        for e in range(self.shape[0]):
            Ht = np.hstack([H[e], np.ones((H.shape[1], 1))])
            _, S, Vt = np.linalg.svd(Ht, full_matrices=False)
            g = 1.0 / np.maximum(S, floor * S[0])
            col = np.full(self.shape[2], float(logvar_scale))
            col[: model.d_s] = sd[e]
            self.maps.append((Vt.T * g, col))

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if self.kind == "identity":
            return y
        E, rows, out = self.shape
        Y = y.reshape(E, rows, out)
        dP = np.stack([(M @ Y[e]) * col for e, (M, col) in enumerate(self.maps)])
        return np.concatenate([dP[:, :-1, :].reshape(-1), dP[:, -1:, :].reshape(-1)])


def episode_seeds(seed, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([int(seed), 4242]).generate_state(n)]


def mean_reward(model, params: cartpole.CartpoleParams, planner_config: mpc.PlannerConfig, seeds: Sequence[int],
                horizon: int = 200) -> float:
    reward_fn = mpc.CartpoleReward(params)
    total = []
    for s in seeds:
        policy = mpc.mpc_policy(model, planner_config, reward_fn, seed=s)
        try:
            total.append(cartpole.rollout(policy, horizon, s, params).total_reward)
        except (RuntimeError, ValueError, FloatingPointError):
            return math.inf
    return float(np.mean(total))


def _evaluate_candidate(model, vector, val_set, planner_config, params, config: AttackConfig, baseline_ll, seeds,
                        screen: bool):
    candidate = model.with_output_layer(vector)
    with np.errstate(all="ignore"):
        ll = dm.evaluate_ll(candidate, val_set).mean
    if not math.isfinite(ll):
        return math.inf, math.nan, ll
    penalty = config.penalty_coeff() * max(0.0, baseline_ll - ll - config.ll_tolerance)
    if screen and penalty > 0:
        # every feasible candidate scores at most the horizon, so ranking is kept
        reward = float(config.horizon)
    else:
        reward = mean_reward(candidate, params, planner_config, seeds, config.horizon)
    f = reward + penalty
    return (f if math.isfinite(f) else math.inf), reward, ll


def fitness(candidate, model: dm.DynamicsModel, val_set: TransitionSet, planner_config: mpc.PlannerConfig,
            params: cartpole.CartpoleParams, config: AttackConfig, baseline_ll: float | None = None) -> float:
    """Mean seeded MPC reward with the candidate output layer plus the LL hinge penalty."""
    vector = np.asarray(candidate, dtype=np.float64).reshape(-1)
    if vector.size != model.output_layer_vector().size:
        raise ValueError("candidate length must equal the output-layer parameter count")
    if baseline_ll is None:
        baseline_ll = dm.evaluate_ll(model, val_set).mean
    seeds = episode_seeds(config.seed, config.trials_per_eval)
    return _evaluate_candidate(model, vector, val_set, planner_config, params, config, baseline_ll, seeds, False)[0]


def _population_unit(model, val_set, planner_config, params, config, baseline_ll, seeds, x0, basis, y):
    vector = x0 + basis(y)
    return _evaluate_candidate(model, vector, val_set, planner_config, params, config, baseline_ll, seeds,
                               config.screen_ll)


def attack(model: dm.DynamicsModel, val_set: TransitionSet, params: cartpole.CartpoleParams | None = None,
           planner_config: mpc.PlannerConfig | None = None, config: AttackConfig | None = None,
           log_path=None) -> AttackResult:
    """Search the output layer for a model that plans badly but fits ``val_set`` as well as before.

    The baseline layer is the starting incumbent.  The result carries the
    best candidate that satisfies the LL constraint; ``success`` is set when
    that candidate differs from the baseline.
    """
    params = params or cartpole.CartpoleParams()
    planner_config = planner_config or mpc.PlannerConfig()
    config = config or AttackConfig()
    x0 = model.output_layer_vector()
    seeds = episode_seeds(config.seed, config.trials_per_eval)
    baseline_ll = dm.evaluate_ll(model, val_set).mean
    baseline_reward = mean_reward(model, params, planner_config, seeds, config.horizon)
    if not (math.isfinite(baseline_ll) and math.isfinite(baseline_reward)):
        raise RuntimeError("attack infeasible under tolerance")

    basis = SearchBasis(model, val_set, config.basis, config.basis_floor, config.logvar_scale)
    if config.sigma0 is not None:
        sigma0 = config.sigma0
    elif config.basis == "identity":
        sigma0 = 0.05 * float(np.std(model.layers[-1][0]))
    else:
        sigma0 = 0.5
    cma_cfg = CMAConfig(popsize=config.population, parents=config.parents, sigma0=max(sigma0, 1e-12),
                        max_generations=config.max_generations, covariance=config.covariance, seed=config.seed,
                        target=None if config.target_fraction is None else config.target_fraction * baseline_reward)
    incumbent = {"x": x0, "f": baseline_reward, "reward": baseline_reward, "ll": baseline_ll}
    unit = partial(_population_unit, model, val_set, planner_config, params, config, baseline_ll, seeds, x0, basis)
    limit = baseline_ll - config.ll_tolerance

    def evaluate(ys):
        results = parallel_map(unit, list(ys), config.workers)
        for y, (f, reward, ll) in zip(ys, results):
            if math.isfinite(f) and ll >= limit and f < incumbent["f"]:
                incumbent.update(x=x0 + basis(y), f=f, reward=reward, ll=ll)
        return [r[0] for r in results]

    history: list[dict] = []

    def record(entry):
        history.append({"generation": entry["generation"], "best_fitness": min(entry["best_fitness"], incumbent["f"]),
                        "sigma": entry["sigma"], "reward": incumbent["reward"], "ll": incumbent["ll"]})

    result = cma_es_minimize(lambda y: math.inf, np.zeros(basis.size), cma_cfg, evaluate=evaluate, callback=record)
    if incumbent["ll"] < limit:
        raise RuntimeError("attack infeasible under tolerance")
    attacked = model.with_output_layer(incumbent["x"])
    if log_path is not None:
        write_attack_log(log_path, history)
    return AttackResult(baseline_reward=baseline_reward, baseline_ll=baseline_ll, final_reward=incumbent["reward"],
                        final_ll=incumbent["ll"], history=history, model=attacked,
                        success=incumbent["x"] is not x0, evaluations=result.evaluations, vector=incumbent["x"])


ATTACK_LOG_HEADER = ["generation", "best_fitness", "sigma", "reward", "ll"]


def write_attack_log(path, history: Sequence[dict]):
    return write_csv(path, ATTACK_LOG_HEADER, ([h[k] for k in ATTACK_LOG_HEADER] for h in history))
