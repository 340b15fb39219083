"""Numba switch.

``RFMTL_ACCEL=numpy`` forces the pure-numpy kernels; anything else (or unset)
uses numba when it can be imported.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _requested() -> str:
    return os.environ.get("RFMTL_ACCEL", "numba").strip().lower()


USE_NUMBA = HAVE_NUMBA and _requested() != "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator.

    Functions stay importable (and runnable, slowly) without numba so the
    numpy fallback path never depends on it.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
