"""Switch between numba-compiled kernels and the plain numpy path.

Set ``TRAFOREST_DISABLE_NUMBA=1`` before import to run every kernel through
its numpy implementation (useful for debugging and for benchmarking).
"""
import os

USE_NUMBA = os.environ.get("TRAFOREST_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if USE_NUMBA:
    def njit(fn):
        return numba.njit(cache=True, nogil=True)(fn)
else:
    def njit(fn):
        return fn
