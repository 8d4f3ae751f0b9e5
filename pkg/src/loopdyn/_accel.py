"""Numba dispatch.

Hot kernels exist twice: an ``@njit`` loop version (``kernels.numba_impl``)
and a vectorized numpy version (``kernels.numpy_impl``). Set
``LOOPDYN_NUMBA=0`` before import to force the numpy path; it is also used
when numba cannot be imported.
"""

from __future__ import annotations

import os

_flag = os.environ.get("LOOPDYN_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "no", "off")

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

HAS_NUMBA = NUMBA_REQUESTED and NUMBA_AVAILABLE


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
