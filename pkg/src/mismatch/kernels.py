"""Hot numeric kernels with numba and pure-numpy implementations.

Every kernel body is written once against scalars.  ``_build(jit)`` compiles
the scalar form with numba for the loop variants; the numpy variants call the
uncompiled scalar helpers with whole arrays, which works because they only
use ufuncs.  The public functions at the bottom dispatch on
:func:`mismatch._accel.backend`.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel

# Layout of the packed cartpole parameter vector shared by all kernels.
P_CART_MASS = 0
P_POLE_MASS = 1
P_HALF_LENGTH = 2
P_GRAVITY = 3
P_FORCE_SCALE = 4
P_DT = 5
P_SUBSTEPS = 6
P_X_GOAL = 7
P_LENGTHSCALE = 8
P_ACTION_PENALTY = 9
N_PARAMS = 10

TWO_PI = 2.0 * math.pi


def _identity(func):
    return func


def _build(jit):
    """Return the scalar kernel family compiled with ``jit``."""

    @jit
    def wrap_angle(theta):
        # maps onto (-pi, pi]
        return theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)

    @jit
    def accelerations(theta, theta_dot, force, p):
        total = p[P_CART_MASS] + p[P_POLE_MASS]
        ml = p[P_POLE_MASS] * p[P_HALF_LENGTH]
        sin = np.sin(theta)
        cos = np.cos(theta)
        temp = (force + ml * theta_dot * theta_dot * sin) / total
        theta_acc = (p[P_GRAVITY] * sin - cos * temp) / (
            p[P_HALF_LENGTH] * (4.0 / 3.0 - p[P_POLE_MASS] * cos * cos / total)
        )
        x_acc = temp - ml * theta_acc * cos / total
        return x_acc, theta_acc

    @jit
    def rk4(x, x_dot, theta, theta_dot, action, p):
        force = action * p[P_FORCE_SCALE]
        n_sub = int(p[P_SUBSTEPS])
        h = p[P_DT] / n_sub
        for _ in range(n_sub):
            a1, b1 = accelerations(theta, theta_dot, force, p)
            x2 = x_dot + 0.5 * h * a1
            t2 = theta_dot + 0.5 * h * b1
            a2, b2 = accelerations(theta + 0.5 * h * theta_dot, t2, force, p)
            x3 = x_dot + 0.5 * h * a2
            t3 = theta_dot + 0.5 * h * b2
            a3, b3 = accelerations(theta + 0.5 * h * t2, t3, force, p)
            x4 = x_dot + h * a3
            t4 = theta_dot + h * b3
            a4, b4 = accelerations(theta + h * t3, t4, force, p)
            x = x + h / 6.0 * (x_dot + 2.0 * x2 + 2.0 * x3 + x4)
            theta = theta + h / 6.0 * (theta_dot + 2.0 * t2 + 2.0 * t3 + t4)
            x_dot = x_dot + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            theta_dot = theta_dot + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        return x, x_dot, wrap_angle(theta), theta_dot

    @jit
    def reward(x, theta, action, p):
        tip_len = 2.0 * p[P_HALF_LENGTH]
        dx = x + tip_len * np.sin(theta) - p[P_X_GOAL]
        dy = tip_len * np.cos(theta) - tip_len
        ell = p[P_LENGTHSCALE]
        return np.exp(-(dx * dx + dy * dy) / (ell * ell)) - p[P_ACTION_PENALTY] * action * action

    return wrap_angle, accelerations, rk4, reward


wrap_angle_py, accelerations_py, rk4_py, reward_py = _build(_identity)
wrap_angle_nb, accelerations_nb, rk4_nb, reward_nb = _build(_accel.njit)


# --- numba loop kernels --------------------------------------------------------


@_accel.njit
def _step_batch_nb(states, actions, p):
    out = np.empty_like(states)
    for i in range(states.shape[0]):
        x, xd, th, thd = rk4_nb(states[i, 0], states[i, 1], states[i, 2], states[i, 3], actions[i], p)
        out[i, 0] = x
        out[i, 1] = xd
        out[i, 2] = th
        out[i, 3] = thd
    return out


@_accel.njit
def _sequence_returns_nb(s0, actions, p):
    n, horizon = actions.shape
    out = np.empty(n)
    for i in range(n):
        x, xd, th, thd = s0[0], s0[1], s0[2], s0[3]
        total = 0.0
        for t in range(horizon):
            a = actions[i, t]
            x, xd, th, thd = rk4_nb(x, xd, th, thd, a, p)
            total += reward_nb(x, th, a, p)
        if math.isfinite(total) and math.isfinite(x) and math.isfinite(xd) and math.isfinite(thd):
            out[i] = total
        else:
            out[i] = -np.inf
    return out


@_accel.njit
def _min_distance_nb(points, reference):
    n, d = points.shape
    m = reference.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = points[i, k] - reference[j, k]
                acc += diff * diff
                if acc >= best:
                    break
            if acc < best:
                best = acc
        out[i] = math.sqrt(best)
    return out


@_accel.njit
def _min_segment_distance_nb(points, starts, ends):
    n, d = points.shape
    m = starts.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            seg2 = 0.0
            dot = 0.0
            for k in range(d):
                u = ends[j, k] - starts[j, k]
                seg2 += u * u
                dot += (points[i, k] - starts[j, k]) * u
            t = 0.0
            if seg2 > 0.0:
                t = min(1.0, max(0.0, dot / seg2))
            acc = 0.0
            for k in range(d):
                diff = points[i, k] - (starts[j, k] + t * (ends[j, k] - starts[j, k]))
                acc += diff * diff
            if acc < best:
                best = acc
        out[i] = math.sqrt(best)
    return out


# --- numpy vectorized kernels -------------------------------------------------


def _step_batch_np(states, actions, p):
    x, xd, th, thd = rk4_py(states[:, 0], states[:, 1], states[:, 2], states[:, 3], actions, p)
    return np.stack([x, xd, th, thd], axis=1)


def _sequence_returns_np(s0, actions, p):
    n, horizon = actions.shape
    x = np.full(n, s0[0])
    xd = np.full(n, s0[1])
    th = np.full(n, s0[2])
    thd = np.full(n, s0[3])
    total = np.zeros(n)
    with np.errstate(all="ignore"):
        for t in range(horizon):
            a = actions[:, t]
            x, xd, th, thd = rk4_py(x, xd, th, thd, a, p)
            total += reward_py(x, th, a, p)
        ok = np.isfinite(total) & np.isfinite(x) & np.isfinite(xd) & np.isfinite(thd)
    return np.where(ok, total, -np.inf)


def _min_distance_np(points, reference, chunk=512):
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], chunk):
        block = points[lo : lo + chunk]
        diff = block[:, None, :] - reference[None, :, :]
        out[lo : lo + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return out


def _min_segment_distance_np(points, starts, ends, chunk=512):
    out = np.empty(points.shape[0])
    u = ends - starts
    seg2 = np.einsum("ij,ij->i", u, u)
    for lo in range(0, points.shape[0], chunk):
        block = points[lo : lo + chunk]
        rel = block[:, None, :] - starts[None, :, :]
        dot = np.einsum("ijk,jk->ij", rel, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(seg2 > 0, np.clip(dot / seg2, 0.0, 1.0), 0.0)
        diff = rel - t[:, :, None] * u[None, :, :]
        out[lo : lo + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return out


# --- dispatch -----------------------------------------------------------------


def step_batch(states: np.ndarray, actions: np.ndarray, p: np.ndarray) -> np.ndarray:
    """One environment step for each row of ``states`` (N, 4) under ``actions`` (N,)."""
    states = np.ascontiguousarray(states, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.float64).reshape(-1)
    if _accel.USE_NUMBA:
        return _step_batch_nb(states, actions, p)
    return _step_batch_np(states, actions, p)


def sequence_returns(s0: np.ndarray, actions: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Exact returns of N action sequences (N, T) from ``s0``; diverged rows get ``-inf``."""
    s0 = np.ascontiguousarray(s0, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _sequence_returns_nb(s0, actions, p)
    return _sequence_returns_np(s0, actions, p)


def min_distance(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Euclidean distance from every row of ``points`` to its nearest ``reference`` row."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    reference = np.ascontiguousarray(reference, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _min_distance_nb(points, reference)
    return _min_distance_np(points, reference)


def min_segment_distance(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Distance from every point to the nearest of the segments ``starts[j] -> ends[j]``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    starts = np.ascontiguousarray(starts, dtype=np.float64)
    ends = np.ascontiguousarray(ends, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _min_segment_distance_nb(points, starts, ends)
    return _min_segment_distance_np(points, starts, ends)
