"""Numba switch for the hot kernels.

Set ``OCCLUFORGE_NUMBA=0`` before import to run every kernel through its
pure-numpy path. Useful for debugging and for the benchmark in
``benchmarks/bench_visibility.py``.
"""

import os

try:
    import numba
    from numba import njit as _njit
    from numba import prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    NUMBA_AVAILABLE = False
    prange = range

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("OCCLUFORGE_NUMBA", "1") != "0"


def jit(*args, **kwargs):
    """``numba.njit`` when enabled, identity otherwise."""
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def decorator(func):
        return func

    return decorator


def set_num_threads(n: int) -> None:
    if USE_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
