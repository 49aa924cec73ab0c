"""Numba switch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``FRAPPE_KIT_NUMBA=0`` is set (or numba is missing),
in which case callers use the vectorized numpy implementations instead.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None


def numba_requested():
    return os.environ.get("FRAPPE_KIT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
