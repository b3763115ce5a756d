"""Numba dispatch switch.

Hot kernels are written twice: an ``@njit`` loop and a vectorized numpy
equivalent. Set ``RAZER_DISABLE_NUMBA=1`` to force the numpy path (also used
automatically when numba is not importable). ``RAZER_THREADS`` caps the
number of threads used by parallel kernels.
"""
import os

# the TBB layer shipped in some images is too old and only produces a warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

_DISABLED = os.environ.get("RAZER_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba
    from numba import njit, prange
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency, but stay importable
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func
        return decorator

    prange = range

USE_NUMBA = _HAVE_NUMBA and not _DISABLED


def apply_thread_cap():
    """Honour RAZER_THREADS for numba's parallel pool; returns the active count or None."""
    raw = os.environ.get("RAZER_THREADS")
    if not (USE_NUMBA and raw):
        return None
    want = max(1, int(raw))
    numba.set_num_threads(min(want, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
