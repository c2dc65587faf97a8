"""Backend selection for the bilinear sampling kernels.

The compiled extension is used when it imports; otherwise, or when the
``WARPC_PURE_PYTHON`` environment variable is set to a non-empty value other
than ``0``, the numpy implementation is used. Both expose the same functions.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("WARPC_PURE_PYTHON", "0") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _prep(src, x, y):
    src = np.ascontiguousarray(src, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return src, x, y


def bilinear_sample(src, x, y, impl=None):
    src, x, y = _prep(src, x, y)
    return (impl or _impl).bilinear_sample(src, x, y)


def bilinear_sample_backward(src, x, y, grad_out, impl=None):
    src, x, y = _prep(src, x, y)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    return (impl or _impl).bilinear_sample_backward(src, x, y, grad_out)
