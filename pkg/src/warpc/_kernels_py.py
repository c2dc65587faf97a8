"""Pure-numpy bilinear sampling kernels.

Reference implementation of the routines in ``_kernels.pyx``; used when the
compiled extension is unavailable or ``WARPC_PURE_PYTHON=1`` is set.
"""

import numpy as np


def _corners(x, y, h, w):
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    # at the last row/column the fractional part is zero, so the clamped
    # neighbour carries no weight
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return valid, x0, y0, x1, y1, fx, fy


def bilinear_sample(src, x, y):
    """Sample ``src`` (h, w, c) at absolute pixel coordinates ``x``, ``y``.

    Returns ``(out, valid)``. Samples outside ``[0, w-1] x [0, h-1]`` are
    zero with ``valid`` false.
    """
    h, w, _ = src.shape
    valid, x0, y0, x1, y1, fx, fy = _corners(x, y, h, w)
    fx = fx[..., None]
    fy = fy[..., None]
    a = src[y0, x0]
    b = src[y0, x1]
    c = src[y1, x0]
    d = src[y1, x1]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    out = top + fy * (bot - top)
    out[~valid] = 0.0
    return out, valid


def bilinear_sample_backward(src, x, y, grad_out):
    """Adjoint of :func:`bilinear_sample`.

    Returns ``(grad_src, grad_x, grad_y)`` for an upstream gradient
    ``grad_out`` shaped like the sampled output.
    """
    h, w, ch = src.shape
    valid, x0, y0, x1, y1, fx, fy = _corners(x, y, h, w)
    g = np.where(valid[..., None], grad_out, 0.0)
    fxe = fx[..., None]
    fye = fy[..., None]
    a = src[y0, x0]
    b = src[y0, x1]
    c = src[y1, x0]
    d = src[y1, x1]
    top = a + fxe * (b - a)
    bot = c + fxe * (d - c)
    grad_x = np.sum(g * ((1.0 - fye) * (b - a) + fye * (d - c)), axis=-1)
    grad_y = np.sum(g * (bot - top), axis=-1)

    grad_src = np.zeros((h * w, ch))
    n = h * w
    for idx, wgt in (
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ):
        flat = idx.ravel()
        for k in range(ch):
            grad_src[:, k] += np.bincount(
                flat, weights=(g[..., k] * wgt).ravel(), minlength=n)
    return grad_src.reshape(h, w, ch), grad_x, grad_y
