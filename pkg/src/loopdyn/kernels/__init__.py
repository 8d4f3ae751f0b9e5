"""Kernel selection: numba loops when enabled, numpy otherwise."""

from .._accel import HAS_NUMBA
from . import numpy_impl

if HAS_NUMBA:
    from . import numba_impl as active
else:
    active = numpy_impl

__all__ = ["active", "numpy_impl"]
