"""Kernel dispatch: the compiled extension when built, else the numpy fallback.

Set ``FAMDA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if not os.environ.get("FAMDA_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

window_stats = _impl.window_stats
mask_runs = _impl.mask_runs
vote_refine = _impl.vote_refine

__all__ = ["BACKEND", "window_stats", "mask_runs", "vote_refine"]
