"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``PDC_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

python_backend = _pykernels

if os.environ.get("PDC_KERNELS", "").lower() == "python":
    _impl = _pykernels
    compiled_backend = None
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels
    compiled_backend = _impl if _impl is not _pykernels else None

BACKEND = _impl.BACKEND

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
