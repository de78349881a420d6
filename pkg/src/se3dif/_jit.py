"""Numba toggle for the hot kernels.

Every kernel in the package exists twice: a loop version compiled with
``numba.njit`` and a vectorized numpy twin. ``SE3DIF_DISABLE_NUMBA=1`` (or a
missing numba install) selects the numpy twins everywhere. Both paths are
tested against each other, and ``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("SE3DIF_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(fn):
    """Compile ``fn`` in nopython mode, or return it untouched without numba."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def select(numba_impl, numpy_impl):
    """Pick the active implementation of a kernel pair."""
    return numba_impl if USE_NUMBA else numpy_impl
