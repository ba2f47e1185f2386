"""Optional numba acceleration.

Set ``FEDCC_NUMBA=0`` in the environment to force the pure-numpy kernels.
The flag is read once, at import time.
"""
import os

_flag = os.environ.get("FEDCC_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = _requested and HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    Compilation is requested even when ``USE_NUMBA`` is off so the
    benchmark can still time the compiled kernels side by side.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f
    return wrap


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
