"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``JOINTCAR_BACKEND=numpy`` to force the fallback.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_choice = os.environ.get("JOINTCAR_BACKEND", "auto").lower()
_impl = _pykernels
if _choice != "numpy":
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _pykernels

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
tanh_avgpool_forward = _impl.tanh_avgpool_forward
tanh_avgpool_backward = _impl.tanh_avgpool_backward
deform_argmax = _impl.deform_argmax


def backends():
    """All importable backend modules, keyed by name."""
    out = {"numpy": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
