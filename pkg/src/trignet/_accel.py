"""Optional numba acceleration.

Hot loops are written once in numba-compatible Python.  When numba is
importable and ``TRIGNET_NUMBA`` is not set to ``0`` they are compiled with
``numba.njit``; otherwise the same functions run as plain numpy code.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get("TRIGNET_NUMBA", "1") != "0"


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity otherwise.

    The undecorated function stays reachable as ``.py_func`` in both modes so
    callers can force the pure-numpy path.
    """
    def wrap(fn):
        if NUMBA_ENABLED:
            return numba.njit(cache=True, **kwargs)(fn)
        fn.py_func = fn
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return wrap(args[0])
    return wrap
