"""Convolution unfold kernels.

The compiled Cython extension is used when it has been built; otherwise the
numpy fallback is imported. Set ``DCSWIN_KERNELS=numpy`` to force the
fallback (both backends agree to rounding, see tests/test_kernels.py).
"""

import os

from . import fallback

try:
    from . import _im2col as _compiled
except ImportError:
    _compiled = None

if _compiled is not None and os.environ.get("DCSWIN_KERNELS", "").lower() != "numpy":
    BACKEND = "cython"
    im2col = _compiled.im2col
    col2im = _compiled.col2im
else:
    BACKEND = "numpy"
    im2col = fallback.im2col
    col2im = fallback.col2im


def backends():
    """Return the available ``{name: (im2col, col2im)}`` implementations."""
    out = {"numpy": (fallback.im2col, fallback.col2im)}
    if _compiled is not None:
        out["cython"] = (_compiled.im2col, _compiled.col2im)
    return out


__all__ = ["BACKEND", "backends", "col2im", "im2col"]
