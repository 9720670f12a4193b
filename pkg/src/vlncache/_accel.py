"""Numba switch.

Set ``VLNCACHE_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba
is missing the numpy path is used automatically.
"""

import os
import warnings

_DISABLED = os.environ.get("VLNCACHE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False
    _njit = None
    if not _DISABLED:
        warnings.warn("numba not installed; falling back to numpy kernels", RuntimeWarning)

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(func):
    """Compile with numba when available, otherwise return ``func`` untouched.

    The undecorated function stays reachable as ``.py_func`` in both cases.
    """
    if _njit is None:
        func.py_func = func
        return func
    return _njit(cache=True, nogil=True)(func)
