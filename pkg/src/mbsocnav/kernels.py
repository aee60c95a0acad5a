"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``MBSOCNAV_NO_EXT=1`` to force the pure-Python path.
"""
import os

from . import _pykernels

if os.environ.get("MBSOCNAV_NO_EXT", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

cast_rays = _impl.cast_rays
rasterize = _impl.rasterize
rasterize_stack = _impl.rasterize_stack
