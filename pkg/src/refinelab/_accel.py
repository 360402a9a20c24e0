"""Numba toggle.

Set ``REFINELAB_DISABLE_NUMBA=1`` to force the pure-numpy kernels.  When
numba is not installed the numpy path is used automatically.
"""

import os
from warnings import warn

_FLAG = "REFINELAB_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not numba_disabled()

if not HAVE_NUMBA and not numba_disabled():  # pragma: no cover
    warn("numba not found; falling back to numpy kernels (slower).")


def njit(func):
    """Compile ``func`` with numba when available, else return it untouched."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)
