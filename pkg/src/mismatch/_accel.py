"""Numba switch.

Kernels are written once in scalar-loop form and compiled with ``njit`` when
numba is importable and ``MISMATCH_DISABLE_NUMBA`` is unset.  Each kernel also
has a vectorized numpy twin; :data:`USE_NUMBA` selects which one the public
dispatchers call.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("MISMATCH_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(func):
        return func

    return wrapper


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels at runtime (benchmarks, tests)."""
    global USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not available")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
