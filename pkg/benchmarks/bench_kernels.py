"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from mismatch import _accel, kernels
from mismatch.env import CartpoleParams


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    p = CartpoleParams().packed()
    s0 = np.array([0.0, 0.0, np.pi, 0.0])
    actions = rng.uniform(-1, 1, size=(400, 25))
    states = rng.normal(size=(4000, 4))
    acts = rng.uniform(-1, 1, size=4000)
    points = rng.normal(size=(20000, 5))
    ref = rng.normal(size=(2400, 5))
    return {
        "step_batch 4000": lambda: kernels.step_batch(states, acts, p),
        "sequence_returns 400x25": lambda: kernels.sequence_returns(s0, actions, p),
        "min_distance 20000x2400": lambda: kernels.min_distance(points, ref),
        "min_segment_distance 2000x2399": lambda: kernels.min_segment_distance(points[:2000], ref[:-1], ref[1:]),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    table = {}
    for backend in ("numpy", "numba"):
        if backend == "numba" and not _accel.HAVE_NUMBA:
            continue
        _accel.set_backend(backend)
        for name, fn in cases(rng).items():
            table.setdefault(name, {})[backend] = _time(fn, args.repeat)
    print(f"{'kernel':34s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>8s}")
    for name, row in table.items():
        nb = row.get("numba", np.nan)
        print(f"{name:34s} {1e3 * row['numpy']:12.3f} {1e3 * nb:12.3f} {row['numpy'] / nb:8.1f}")


if __name__ == "__main__":
    main()
