"""Numba availability switch.

Set ``EBD_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when numba
is importable. The choice is fixed at import time.
"""

import os

_DISABLED = os.environ.get("EBD_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("numba disabled by EBD_DISABLE_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when available, otherwise the identity decorator."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
