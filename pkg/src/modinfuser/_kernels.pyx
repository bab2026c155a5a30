# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch extraction kernels; same contract as ``_kernels_py``."""

import numpy as np


def im2col(xp, int kh, int kw, int stride, int ho, int wo):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(xp, dtype=np.float64)
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1]
    out_arr = np.empty((c * kh * kw, b * ho * wo), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, ch, i, j, oy, ox, row, col, iy
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for n in range(b):
                    for oy in range(ho):
                        iy = oy * stride + i
                        col = (n * ho + oy) * wo
                        for ox in range(wo):
                            out[row, col + ox] = x[n, ch, iy, ox * stride + j]
    return out_arr


def col2im(cols, int b, int c, int hp, int wp, int kh, int kw, int stride, int ho, int wo):
    cdef double[:, ::1] src = np.ascontiguousarray(
        np.reshape(cols, (c * kh * kw, b * ho * wo)), dtype=np.float64
    )
    out_arr = np.zeros((b, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, i, j, oy, ox, row, col, iy
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for n in range(b):
                    for oy in range(ho):
                        iy = oy * stride + i
                        col = (n * ho + oy) * wo
                        for ox in range(wo):
                            out[n, ch, iy, ox * stride + j] += src[row, col + ox]
    return out_arr
