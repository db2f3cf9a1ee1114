"""Kernel backend selection.

Numba is used when importable unless ``AILURUS_DISABLE_NUMBA`` is set to a
truthy value, in which case every kernel falls back to its pure-numpy twin.
``AILURUS_THREADS`` caps the numba thread pool.
"""

import os
import warnings

_TRUTHY = {"1", "true", "yes", "on"}


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in _TRUTHY


try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda func: func


USE_NUMBA = HAVE_NUMBA and not _flag("AILURUS_DISABLE_NUMBA")


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def apply_thread_cap() -> int:
    """Honour ``AILURUS_THREADS``; returns the active thread count."""
    if not HAVE_NUMBA:
        return 1
    cap = os.environ.get("AILURUS_THREADS")
    if cap:
        try:
            n = max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS))
        except ValueError:
            warnings.warn(f"ignoring non-integer AILURUS_THREADS={cap!r}", stacklevel=2)
        else:
            numba.set_num_threads(n)
    return numba.get_num_threads()


apply_thread_cap()
