"""Feed-forward dynamics models: D, P, DE and PE.

Networks predict the state change ``s' - s`` from z-scored input features.
Angle dimensions of the state enter the network as (sin, cos) pairs and
their deltas are wrapped to (-pi, pi].  Ensemble members are stored stacked
along a leading axis so one matmul evaluates (or trains) every member.

Probabilistic kinds output a mean and a raw log-variance per state dimension;
the log-variance is soft-bounded to ``[lv_min, lv_max]``.  Deterministic
kinds report ``lv_min`` as their log-variance.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .data import Normalizer, TransitionSet, batch_indices

KINDS = ("D", "P", "DE", "PE")
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"MMDYN\x00\x01\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "PE"
    ensemble_size: int | None = None  # 1 for D/P, 5 for DE/PE
    width: int = 500
    depth: int = 2
    activation: str = "swish"
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs_full: int = 100
    epochs_initial: int = 100
    epochs_incremental: int = 10
    weight_decay: float = 0.0
    lv_min: float = -10.0
    lv_max: float = 0.5
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.ensemble_size is None:
            self.ensemble_size = 5 if self.kind.endswith("E") else 1
        if self.kind in ("D", "P") and self.ensemble_size != 1:
            raise ValueError(f"kind {self.kind} requires ensemble_size 1")
        if self.kind in ("DE", "PE") and self.ensemble_size < 2:
            raise ValueError(f"kind {self.kind} requires ensemble_size >= 2")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.lv_min < self.lv_max:
            raise ValueError("lv_min must be below lv_max")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def probabilistic(self) -> bool:
        return self.kind.startswith("P")

    def to_dict(self) -> dict:
        return asdict(self)


# --- activations ----------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _swish(z):
    out = np.tanh(0.5 * z)
    out += 1.0
    out *= z
    out *= 0.5
    return out


def _swish_grad(z):
    sg = _sigmoid(z)
    return sg + z * sg * (1.0 - sg)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


_ACTIVATIONS = {
    "swish": (_swish, _swish_grad),
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def _softplus(x):
    return np.logaddexp(0.0, x)


def soft_bound_logvar(raw, lv_min: float, lv_max: float):
    """Squash raw log-variances into [lv_min, lv_max]; returns (logvar, d logvar / d raw)."""
    upper = lv_max - _softplus(lv_max - raw)
    lv = lv_min + _softplus(upper - lv_min)
    grad = _sigmoid(lv_max - raw) * _sigmoid(upper - lv_min)
    # softplus overshoots lv_max by at most log1p(exp(lv_min - lv_max)); clamp it exactly
    over = lv > lv_max
    if np.any(over):
        lv = np.where(over, lv_max, lv)
        grad = np.where(over, 0.0, grad)
    return lv, grad


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    logvar: np.ndarray


@dataclass
class EnsemblePrediction:
    means: np.ndarray  # (E, N, d_s)
    logvars: np.ndarray  # (E, N, d_s)

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    @property
    def members(self) -> list[GaussianPrediction]:
        return [GaussianPrediction(m, lv) for m, lv in zip(self.means, self.logvars)]

    def aggregate(self) -> GaussianPrediction:
        """Moment-matched Gaussian of the ensemble (mean of means, total variance)."""
        var = np.exp(self.logvars).mean(axis=0) + self.means.var(axis=0)
        return GaussianPrediction(self.mean, np.log(var))


def nll(prediction: GaussianPrediction, observed) -> np.ndarray:
    """Per-sample Gaussian negative log-likelihood summed over the last axis."""
    mu = np.asarray(prediction.mean, dtype=np.float64)
    lv = np.asarray(prediction.logvar, dtype=np.float64)
    y = np.asarray(observed, dtype=np.float64)
    if mu.shape != y.shape or lv.shape != y.shape:
        raise ValueError("prediction and observation shapes differ")
    return 0.5 * np.sum((y - mu) ** 2 * np.exp(-lv) + lv + LOG_2PI, axis=-1)


@dataclass
class WeightSpec:
    """Per-sample loss weights.

    ``distance``: ``c * exp(-d*)``, optionally zeroed beyond ``cutoff``.
    ``reward``: ``c * (r - r_min) / (r_max - r_min)`` over the set.
    """

    mode: str = "none"
    c: float = 1.0
    cutoff: float | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("none", "distance", "reward"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")
        if not self.c >= 0:
            raise ValueError("c must be non-negative")


def weights_from(spec: WeightSpec | None, samples: TransitionSet, reward_fn: Callable | None = None) -> np.ndarray:
    n = len(samples)
    if spec is None or spec.mode == "none":
        return np.ones(n)
    if spec.mode == "distance":
        d = samples.dstar if spec.values is None else np.asarray(spec.values, dtype=np.float64)
        if d.shape != (n,) or np.any(np.isnan(d)):
            raise ValueError("distance weighting needs d* for every sample")
        w = spec.c * np.exp(-d)
        if spec.cutoff is not None:
            w = np.where(d > spec.cutoff, 0.0, w)
        return w
    if spec.values is not None:
        r = np.asarray(spec.values, dtype=np.float64)
    elif reward_fn is not None:
        r = np.asarray(reward_fn(samples.s_next, samples.a), dtype=np.float64)
    else:
        raise ValueError("reward weighting needs rewards or a reward function")
    if r.shape != (n,) or np.any(~np.isfinite(r)):
        raise ValueError("reward weighting needs a finite reward for every sample")
    span = r.max() - r.min()
    if span == 0:
        return np.full(n, float(spec.c))
    return spec.c * (r - r.min()) / span


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def extend(self, other: "TrainingHistory") -> None:
        offset = self.epochs[-1] + 1 if self.epochs else 0
        self.train_loss.extend(other.train_loss)
        self.val_loss.extend(other.val_loss)
        self.epochs.extend(e + offset for e in other.epochs)


@dataclass
class LLResult:
    mean: float
    per_sample: np.ndarray
    batch_means: list

    @property
    def mean_of_batch_means(self) -> float:
        return float(np.mean(self.batch_means))


class DynamicsModel:
    def __init__(self, config: ModelConfig, d_s: int = 4, d_a: int = 1, angle_dims: Sequence[int] = (2,)):
        self.config = config
        self.d_s = int(d_s)
        self.d_a = int(d_a)
        self.angle_dims = tuple(int(i) for i in angle_dims)
        self._plain_dims = tuple(i for i in range(self.d_s) if i not in self.angle_dims)
        self.in_dim = self.d_s + len(self.angle_dims) + self.d_a
        self.out_dim = 2 * self.d_s if config.probabilistic else self.d_s
        self.dtype = np.dtype(config.dtype)
        self.normalizer = Normalizer(np.zeros(self.in_dim), np.ones(self.in_dim))
        self.history = TrainingHistory()
        self.n_train_calls = 0
        self.layers = self._init_layers(np.random.default_rng(np.random.SeedSequence([config.seed, 7919])))

    # --- structure ---------------------------------------------------------------

    @property
    def ensemble_size(self) -> int:
        return self.config.ensemble_size

    def _init_layers(self, rng):
        sizes = [self.in_dim] + [self.config.width] * self.config.depth + [self.out_dim]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.standard_normal((self.ensemble_size, fan_in, fan_out)) / math.sqrt(fan_in)
            b = np.zeros((self.ensemble_size, 1, fan_out))
            layers.append([W.astype(self.dtype), b.astype(self.dtype)])
        return layers

    def copy(self) -> "DynamicsModel":
        other = DynamicsModel.__new__(DynamicsModel)
        other.__dict__.update(self.__dict__)
        other.config = ModelConfig(**self.config.to_dict())
        other.layers = [[W.copy(), b.copy()] for W, b in self.layers]
        other.normalizer = Normalizer(self.normalizer.mean, self.normalizer.std)
        other.history = TrainingHistory(list(self.history.train_loss), list(self.history.val_loss),
                                        list(self.history.epochs))
        return other

    def n_parameters(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def output_layer_vector(self) -> np.ndarray:
        """Weights then biases of the final affine map, flattened row-major, as float64."""
        W, b = self.layers[-1]
        return np.concatenate([W.reshape(-1), b.reshape(-1)]).astype(np.float64)

    def with_output_layer(self, vector) -> "DynamicsModel":
        """Copy of the model with the final affine map replaced by ``vector``."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        W, b = self.layers[-1]
        if vector.size != W.size + b.size:
            raise ValueError(f"expected {W.size + b.size} output-layer parameters, got {vector.size}")
        other = self.copy()
        other.layers[-1] = [vector[: W.size].reshape(W.shape).astype(self.dtype),
                            vector[W.size :].reshape(b.shape).astype(self.dtype)]
        return other

    def permuted(self, order: Sequence[int]) -> "DynamicsModel":
        other = self.copy()
        order = np.asarray(order)
        other.layers = [[W[order].copy(), b[order].copy()] for W, b in self.layers]
        return other

    # --- feature maps --------------------------------------------------------------

    def features(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.d_s)
        a = np.asarray(a, dtype=np.float64).reshape(s.shape[0], self.d_a)
        ang = s[:, self.angle_dims]
        return np.concatenate([s[:, self._plain_dims], np.sin(ang), np.cos(ang), a], axis=1)

    def targets(self, s, s_next) -> np.ndarray:
        delta = np.asarray(s_next, dtype=np.float64) - np.asarray(s, dtype=np.float64)
        if self.angle_dims:
            delta[:, self.angle_dims] = kernels.wrap_angle_py(delta[:, self.angle_dims])
        return delta

    def apply_delta(self, s, delta) -> np.ndarray:
        out = np.asarray(s, dtype=np.float64) + delta
        if self.angle_dims:
            out[:, self.angle_dims] = kernels.wrap_angle_py(out[:, self.angle_dims])
        return out

    # --- forward / backward ----------------------------------------------------------

    def _forward(self, z, keep_cache: bool = False, mean_only: bool = False):
        act, _ = _ACTIVATIONS[self.config.activation]
        h = z
        cache = [h]
        for W, b in self.layers[:-1]:
            pre = np.matmul(h, W) + b
            h = act(pre)
            if keep_cache:
                cache.extend([pre, h])
        W, b = self.layers[-1]
        d = self.d_s
        if mean_only:
            return np.matmul(h, W[:, :, :d]) + b[:, :, :d], None, None
        out = np.matmul(h, W) + b
        if self.config.probabilistic:
            lv, dlv = soft_bound_logvar(out[..., d:], self.config.lv_min, self.config.lv_max)
            mean = out[..., :d]
        else:
            mean = out
            lv = np.full_like(mean, self.config.lv_min)
            dlv = None
        return mean, lv, (cache, dlv)

    def _normalized(self, s, a) -> np.ndarray:
        feats = self.normalizer.transform(self.features(s, a))
        return feats.astype(self.dtype, copy=False)

    def predict(self, s, a) -> EnsemblePrediction:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.d_s)
        z = self._normalized(s, a)
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite model input")
        mean, lv, _ = self._forward(z[None, :, :])
        return EnsemblePrediction(mean.astype(np.float64), lv.astype(np.float64))

    def next_states(self, states, actions) -> np.ndarray:
        """Expectation propagation step: ``s + mean over members of predicted delta``."""
        z = self._normalized(states, actions)
        mean, _, _ = self._forward(z[None, :, :], mean_only=True)
        return self.apply_delta(states, mean.mean(axis=0, dtype=np.float64))

    def hidden_features(self, s, a) -> np.ndarray:
        """Last hidden-layer activations, shape (E, N, width): the output layer's inputs."""
        act, _ = _ACTIVATIONS[self.config.activation]
        h = self._normalized(np.asarray(s, dtype=np.float64).reshape(-1, self.d_s), a)[None, :, :]
        for W, b in self.layers[:-1]:
            h = act(np.matmul(h, W) + b)
        return np.broadcast_to(h, (self.ensemble_size,) + h.shape[1:]).astype(np.float64)

    def predict_next_state(self, s, a) -> np.ndarray:
        return self.next_states(np.asarray(s, dtype=np.float64).reshape(-1, self.d_s), a)

    def loss_and_gradients(self, z, y, w):
        """Batch loss and parameter gradients.

        ``z`` (E, B, in) normalized features, ``y`` (E, B, d_s) target deltas,
        ``w`` (E, B) sample weights.  The loss is the sum over members of the
        weighted batch mean of NLL (probabilistic kinds) or squared error.
        """
        _, act_grad = _ACTIVATIONS[self.config.activation]
        mean, lv, (cache, dlv) = self._forward(z, keep_cache=True)
        B = z.shape[1]
        err = mean - y
        if self.config.probabilistic:
            inv = np.exp(-lv)
            per = 0.5 * np.sum(err * err * inv + lv + LOG_2PI, axis=-1)
            g_mean = err * inv
            g_raw = 0.5 * (1.0 - err * err * inv) * dlv
            g_out = np.concatenate([g_mean, g_raw], axis=-1)
        else:
            per = np.sum(err * err, axis=-1)
            g_out = 2.0 * err
        loss = float(np.sum(w * per) / B)
        g = g_out * (w[..., None] / B)
        grads = [None] * len(self.layers)
        h = cache[-1]
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            gW = np.matmul(np.swapaxes(h, 1, 2), g)
            gb = g.sum(axis=1, keepdims=True)
            if self.config.weight_decay:
                gW = gW + self.config.weight_decay * W
            grads[k] = [gW, gb]
            if k == 0:
                break
            g = np.matmul(g, np.swapaxes(W, 1, 2)) * act_grad(cache[2 * k - 1])
            h = cache[2 * k - 2]
        if self.config.weight_decay:
            loss += 0.5 * self.config.weight_decay * sum(float(np.sum(W * W)) for W, _ in self.layers)
        return loss, grads

    # --- likelihood -------------------------------------------------------------------

    def member_log_densities(self, data: TransitionSet) -> np.ndarray:
        pred = self.predict(data.s, data.a)
        y = self.targets(data.s, data.s_next)[None, :, :]
        return -0.5 * np.sum((y - pred.means) ** 2 * np.exp(-pred.logvars) + pred.logvars + LOG_2PI, axis=-1)

    def sample_log_likelihood(self, data: TransitionSet) -> np.ndarray:
        """log of the member-averaged density for every transition."""
        logp = self.member_log_densities(data)
        top = logp.max(axis=0)
        return top + np.log(np.mean(np.exp(logp - top), axis=0))


# --- training ------------------------------------------------------------------------


class _Adam:
    def __init__(self, layers, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [[np.zeros_like(p) for p in layer] for layer in layers]
        self.v = [[np.zeros_like(p) for p in layer] for layer in layers]
        self.t = 0

    def step(self, layers, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for layer, glayer, mlayer, vlayer in zip(layers, grads, self.m, self.v):
            for i in range(2):
                g = glayer[i]
                mlayer[i] *= self.beta1
                mlayer[i] += (1.0 - self.beta1) * g
                vlayer[i] *= self.beta2
                vlayer[i] += (1.0 - self.beta2) * g * g
                layer[i] -= (self.lr * (mlayer[i] / c1) / (np.sqrt(vlayer[i] / c2) + self.eps)).astype(layer[i].dtype)


def validation_loss(model: DynamicsModel, data: TransitionSet, batching: str = "random") -> float:
    """Mixture NLL per transition for probabilistic kinds, squared error of the mean otherwise."""
    if model.config.probabilistic:
        return -evaluate_ll(model, data, batching).mean
    pred = model.predict(data.s, data.a)
    y = model.targets(data.s, data.s_next)
    return float(np.mean(np.sum((pred.mean - y) ** 2, axis=1)))


def train(
    model: DynamicsModel,
    train_set: TransitionSet,
    val_set: TransitionSet | None = None,
    weights: WeightSpec | None = None,
    mode: str = "full",
    val_batching: str = "random",
    callbacks: Iterable[Callable] = (),
    epochs: int | None = None,
    reward_fn: Callable | None = None,
) -> TrainingHistory:
    """Fit ``model`` in place and return this call's history.

    Each member trains on its own bootstrap resample (ensembles only).  The
    normalizer is refit on every ``full`` call and only on the first
    ``incremental`` call.  Callbacks receive ``(epoch, model)`` after each epoch.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if mode not in ("full", "incremental"):
        raise ValueError(f"unknown training mode {mode!r}")
    cfg = model.config
    first = model.n_train_calls == 0
    if epochs is None:
        if mode == "full":
            epochs = cfg.epochs_full
        else:
            epochs = cfg.epochs_initial if first else cfg.epochs_incremental
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, model.n_train_calls]))
    model.n_train_calls += 1

    feats = model.features(train_set.s, train_set.a)
    if mode == "full" or first:
        model.normalizer = Normalizer.fit(feats)
    z_all = model.normalizer.transform(feats).astype(model.dtype)
    y_all = model.targets(train_set.s, train_set.s_next).astype(model.dtype)
    w_all = weights_from(weights, train_set, reward_fn).astype(model.dtype)

    E, N, B = model.ensemble_size, len(train_set), cfg.batch_size
    if E > 1:
        boot = rng.integers(0, N, size=(E, N))
    else:
        boot = np.arange(N)[None, :]
    opt = _Adam(model.layers, cfg.learning_rate)
    history = TrainingHistory()
    callbacks = list(callbacks)
    for epoch in range(epochs):
        order = np.stack([boot[e, rng.permutation(N)] for e in range(E)])
        total, n_batches = 0.0, 0
        for k, lo in enumerate(range(0, N, B)):
            idx = order[:, lo : lo + B]
            loss, grads = model.loss_and_gradients(z_all[idx], y_all[idx], w_all[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {k}")
            opt.step(model.layers, grads)
            total += loss / E
            n_batches += 1
        history.train_loss.append(total / n_batches)
        history.epochs.append(epoch)
        if val_set is not None and len(val_set):
            history.val_loss.append(validation_loss(model, val_set, val_batching))
        for cb in callbacks:
            cb(epoch, model)
    model.history.extend(history)
    return history


def evaluate_ll(model: DynamicsModel, data: TransitionSet, batching: str = "random",
                batch_size: int = 64, seed=0) -> LLResult:
    """Mean log-likelihood per transition under the member-averaged density."""
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    ll = model.sample_log_likelihood(data)
    groups = batch_indices(data, batch_size, batching, seed)
    return LLResult(mean=float(np.mean(ll)), per_sample=ll, batch_means=[float(np.mean(ll[g])) for g in groups])


# --- checkpoints ------------------------------------------------------------------------


def save_checkpoint(model: DynamicsModel, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    normalizer mean and std, then each layer's W (E, in, out) and b (E, out)
    as row-major little-endian float64."""
    header = json.dumps({
        "config": model.config.to_dict(), "d_s": model.d_s, "d_a": model.d_a,
        "angle_dims": list(model.angle_dims), "n_train_calls": model.n_train_calls,
        "layers": [list(W.shape) for W, _ in model.layers],
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(np.asarray(model.normalizer.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(model.normalizer.std, dtype="<f8").tobytes())
        for W, b in model.layers:
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").reshape(b.shape[0], -1).tobytes())


def load_checkpoint(path) -> DynamicsModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a dynamics-model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    model = DynamicsModel(ModelConfig(**header["config"]), header["d_s"], header["d_a"], header["angle_dims"])
    model.n_train_calls = header["n_train_calls"]

    def take(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        return arr.astype(np.float64)

    model.normalizer = Normalizer(take(model.in_dim), take(model.in_dim))
    layers = []
    for shape in header["layers"]:
        E, fi, fo = shape
        W = take(E * fi * fo).reshape(E, fi, fo).astype(model.dtype)
        b = take(E * fo).reshape(E, 1, fo).astype(model.dtype)
        layers.append([W, b])
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model.layers = layers
    return model
