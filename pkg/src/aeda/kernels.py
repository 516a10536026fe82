"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twin.
Set ``AEDA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

_FORCE_PURE = os.environ.get("AEDA_PURE_PYTHON", "") not in ("", "0")

if _FORCE_PURE:
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
upsample_forward = _impl.upsample_forward
upsample_backward = _impl.upsample_backward
same_padding = _kernels_py.same_padding
