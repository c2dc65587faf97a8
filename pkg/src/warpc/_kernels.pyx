# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear sampling kernels (forward and adjoint)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def bilinear_sample(const double[:, :, ::1] src, const double[:, ::1] x, const double[:, ::1] y):
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], ch = src.shape[2]
    cdef Py_ssize_t oh = x.shape[0], ow = x.shape[1]
    out_arr = np.zeros((oh, ow, ch), dtype=np.float64)
    valid_arr = np.zeros((oh, ow), dtype=np.bool_)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.npy_bool[:, ::1] valid = valid_arr
    cdef Py_ssize_t i, j, k, x0, y0, x1, y1
    cdef double xs, ys, fx, fy, a, b, c, d, top, bot
    with nogil:
        for i in range(oh):
            for j in range(ow):
                xs = x[i, j]
                ys = y[i, j]
                if not (xs >= 0 and xs <= w - 1 and ys >= 0 and ys <= h - 1):
                    continue
                valid[i, j] = 1
                x0 = <Py_ssize_t>floor(xs)
                y0 = <Py_ssize_t>floor(ys)
                fx = xs - x0
                fy = ys - y0
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                for k in range(ch):
                    a = src[y0, x0, k]
                    b = src[y0, x1, k]
                    c = src[y1, x0, k]
                    d = src[y1, x1, k]
                    top = a + fx * (b - a)
                    bot = c + fx * (d - c)
                    out[i, j, k] = top + fy * (bot - top)
    return out_arr, valid_arr


def bilinear_sample_backward(const double[:, :, ::1] src, const double[:, ::1] x,
                             const double[:, ::1] y, const double[:, :, ::1] grad_out):
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], ch = src.shape[2]
    cdef Py_ssize_t oh = x.shape[0], ow = x.shape[1]
    gsrc_arr = np.zeros((h, w, ch), dtype=np.float64)
    gx_arr = np.zeros((oh, ow), dtype=np.float64)
    gy_arr = np.zeros((oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] gsrc = gsrc_arr
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gy = gy_arr
    cdef Py_ssize_t i, j, k, x0, y0, x1, y1
    cdef double xs, ys, fx, fy, a, b, c, d, top, bot, g, sx, sy
    with nogil:
        for i in range(oh):
            for j in range(ow):
                xs = x[i, j]
                ys = y[i, j]
                if not (xs >= 0 and xs <= w - 1 and ys >= 0 and ys <= h - 1):
                    continue
                x0 = <Py_ssize_t>floor(xs)
                y0 = <Py_ssize_t>floor(ys)
                fx = xs - x0
                fy = ys - y0
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                sx = 0.0
                sy = 0.0
                for k in range(ch):
                    g = grad_out[i, j, k]
                    a = src[y0, x0, k]
                    b = src[y0, x1, k]
                    c = src[y1, x0, k]
                    d = src[y1, x1, k]
                    top = a + fx * (b - a)
                    bot = c + fx * (d - c)
                    sx = sx + g * ((1.0 - fy) * (b - a) + fy * (d - c))
                    sy = sy + g * (bot - top)
                    gsrc[y0, x0, k] += g * (1.0 - fx) * (1.0 - fy)
                    gsrc[y0, x1, k] += g * fx * (1.0 - fy)
                    gsrc[y1, x0, k] += g * (1.0 - fx) * fy
                    gsrc[y1, x1, k] += g * fx * fy
                gx[i, j] = sx
                gy[i, j] = sy
    return gsrc_arr, gx_arr, gy_arr
