"""Numba/NumPy backend selection for the hot interpolation kernels.

Set DTIREG_NO_NUMBA=1 to force the pure-NumPy fallback path (useful for
debugging and for benchmarking the compiled kernels against it).
"""

import os

USE_NUMBA = os.environ.get("DTIREG_NO_NUMBA", "0") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
    except ImportError:
        USE_NUMBA = False


def maybe_njit(**njit_kwargs):
    """Decorator: numba.njit when the compiled backend is active, no-op otherwise."""
    def wrap(func):
        if USE_NUMBA:
            import numba
            return numba.njit(cache=True, **njit_kwargs)(func)
        return func
    return wrap
