"""Backend selection for the orbit kernel.

The compiled extension is used when it imports; setting the environment
variable ``ASIPDYN_PURE_PYTHON=1`` forces the numpy fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
orbit_block = _kernels_py.orbit_block

if os.environ.get("ASIPDYN_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        orbit_block = _compiled.orbit_block
        BACKEND = "cython"

__all__ = ["orbit_block", "BACKEND"]
