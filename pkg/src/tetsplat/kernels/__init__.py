"""Kernel backend selection.

The hot per-pixel loops exist twice: a Cython extension (``_core``) and a pure
Python twin (``_fallback``) with identical semantics. The compiled backend is
used when available; set ``TETSPLAT_BACKEND=python`` or ``compiled`` to force
one.
"""

from __future__ import annotations

import importlib
import os
import warnings

from . import _fallback

_requested = os.environ.get("TETSPLAT_BACKEND", "auto").lower()

_core = None
if _requested in ("auto", "compiled"):
    try:
        _core = importlib.import_module(__name__ + "._core")
    except ImportError:
        _core = None
        if _requested == "compiled":
            raise
        warnings.warn("compiled tetsplat kernels unavailable; "
                      "falling back to the slow pure-Python backend")
elif _requested != "python":
    raise ValueError(f"TETSPLAT_BACKEND must be auto|compiled|python, got {_requested!r}")

BACKEND_NAME = "compiled" if _core is not None else "python"


def get_backend():
    return _core if _core is not None else _fallback


def get_backend_by_name(name: str):
    """Explicit backend lookup, used by the backend comparison benchmark."""
    if name == "python":
        return _fallback
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled backend not available")
        return _core
    raise ValueError(f"unknown backend {name!r}")
