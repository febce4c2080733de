"""Kernel backend selection.

The compiled Cython kernel is used when it was built; otherwise the numpy
fallback is loaded. Set ``BITSTACK_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _jacobi_py

fallback_jacobi_sweeps = _jacobi_py.jacobi_sweeps
compiled_jacobi_sweeps = None

try:
    from ._jacobi import jacobi_sweeps as compiled_jacobi_sweeps
except ImportError:  # extension not built
    pass

if compiled_jacobi_sweeps is not None and os.environ.get("BITSTACK_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
    jacobi_sweeps = compiled_jacobi_sweeps
else:
    BACKEND = "python"
    jacobi_sweeps = fallback_jacobi_sweeps
