"""Numba dispatch.

Hot kernels are written once in numba-compatible Python. Setting
``RPMIA_DISABLE_NUMBA=1`` (or running without numba installed) routes every
caller to the pure-numpy implementations instead.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

try:  # pragma: no cover - depends on the environment
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("RPMIA_DISABLE_NUMBA", "").strip().lower() in _FALSY


def njit(fn):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def default_backend():
    return "numba" if USE_NUMBA else "numpy"


def kernel(fn):
    """Compile ``fn`` only when the numba backend is selected.

    For kernels without a separate vectorized twin: under the numpy backend
    they run as plain Python.
    """
    return njit(fn) if USE_NUMBA else fn
