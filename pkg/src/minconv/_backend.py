"""Selects between numba-compiled kernels and the pure-numpy fallback.

Set ``MINCONV_DISABLE_NUMBA=1`` to force the numpy path (also used when
numba cannot be imported).
"""
import os

_disabled = os.environ.get("MINCONV_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

# the bundled TBB is too old for numba and only produces a warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(func):
            return func

        return wrapper

    prange = range

USE_NUMBA = HAVE_NUMBA and not _disabled


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
