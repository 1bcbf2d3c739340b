import numpy as np
import pytest

from mismatch import _accel, kernels
from mismatch.env import CartpoleParams

P = CartpoleParams().packed()


@pytest.fixture
def rng():
    return np.random.default_rng(1)


def _both(fn):
    out = {}
    for name in ("numpy", "numba"):
        _accel.set_backend(name)
        out[name] = fn()
    _accel.set_backend("numba")
    return out


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba unavailable")
def test_backends_agree(rng):
    states = rng.normal(size=(300, 4))
    acts = rng.uniform(-1, 1, 300)
    r = _both(lambda: kernels.step_batch(states, acts, P))
    np.testing.assert_allclose(r["numba"], r["numpy"], rtol=1e-12, atol=1e-12)

    seqs = rng.uniform(-1, 1, (50, 25))
    s0 = np.array([0.0, 0.0, np.pi, 0.0])
    r = _both(lambda: kernels.sequence_returns(s0, seqs, P))
    np.testing.assert_allclose(r["numba"], r["numpy"], rtol=1e-12)

    pts, ref = rng.normal(size=(400, 5)), rng.normal(size=(70, 5))
    r = _both(lambda: kernels.min_distance(pts, ref))
    np.testing.assert_allclose(r["numba"], r["numpy"], rtol=1e-12)
    r = _both(lambda: kernels.min_segment_distance(pts, ref[:-1], ref[1:]))
    np.testing.assert_allclose(r["numba"], r["numpy"], rtol=1e-12, atol=1e-12)


def test_min_distance_brute_force(rng):
    pts, ref = rng.normal(size=(60, 5)), rng.normal(size=(200, 5))
    want = [min(np.linalg.norm(p - q) for q in ref) for p in pts]
    np.testing.assert_allclose(kernels.min_distance(pts, ref), want, rtol=1e-12)


def test_segment_distance_never_exceeds_vertex_distance(rng):
    pts, ref = rng.normal(size=(80, 5)), rng.normal(size=(30, 5))
    seg = kernels.min_segment_distance(pts, ref[:-1], ref[1:])
    assert np.all(seg <= kernels.min_distance(pts, ref) + 1e-12)


def test_sequence_returns_match_stepping(rng):
    seqs = rng.uniform(-1, 1, (5, 10))
    s0 = np.array([0.1, 0.0, 3.0, 0.0])
    want = []
    for seq in seqs:
        s, total = s0[None, :], 0.0
        for a in seq:
            s = kernels.step_batch(s, np.array([a]), P)
            total += kernels.reward_py(s[0, 0], s[0, 2], a, P)
        want.append(total)
    np.testing.assert_allclose(kernels.sequence_returns(s0, seqs, P), want, rtol=1e-12)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")
