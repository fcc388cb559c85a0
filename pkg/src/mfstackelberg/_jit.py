"""Numba switch.

Set ``MFSTACKELBERG_DISABLE_NUMBA=1`` to run every kernel as plain numpy.
"""
import os

DISABLED = os.environ.get("MFSTACKELBERG_DISABLE_NUMBA", "").strip() not in ("", "0")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and not DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn
