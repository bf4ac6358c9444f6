# cython: boundscheck=False, wraparound=False, cdivision=True, nonecheck=False
"""Compiled twins of the kernels in ``fallback.py`` (OpenMP-parallel loops)."""

import numpy as np

cimport numpy as cnp
from cython.parallel import prange

cnp.import_array()

NAME = "native"

ctypedef fused real:
    float
    double

ctypedef Py_ssize_t isize


cdef extern from "omp.h":
    void omp_set_num_threads(int) nogil


def set_num_threads(int n):
    if n > 0:
        omp_set_num_threads(n)


def im2col(real[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef isize n = xp.shape[0], c = xp.shape[1]
    cdef isize hp = xp.shape[2], wp = xp.shape[3]
    out = np.empty((n, c * k * k, ho * wo),
                   dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] cols = out
    cdef isize b, ch, di, dj, i, j, row, nc
    with nogil:
        for nc in prange(n * c, schedule="static"):
            b = nc // c
            ch = nc % c
            for di in range(k):
                for dj in range(k):
                    row = (ch * k + di) * k + dj
                    for i in range(ho):
                        for j in range(wo):
                            cols[b, row, i * wo + j] = xp[b, ch, i * stride + di,
                                                          j * stride + dj]
    return out


def col2im(real[:, :, ::1] cols, xp_shape, int k, int stride, int ho, int wo):
    cdef isize n = xp_shape[0], c = xp_shape[1]
    cdef isize hp = xp_shape[2], wp = xp_shape[3]
    out = np.zeros((n, c, hp, wp),
                   dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dxp = out
    cdef isize b, ch, di, dj, i, j, row, nc
    with nogil:
        for nc in prange(n * c, schedule="static"):
            b = nc // c
            ch = nc % c
            for di in range(k):
                for dj in range(k):
                    row = (ch * k + di) * k + dj
                    for i in range(ho):
                        for j in range(wo):
                            dxp[b, ch, i * stride + di, j * stride + dj] += \
                                cols[b, row, i * wo + j]
    return out


def pool2_argmax(real[:, :, :, ::1] x):
    cdef isize n = x.shape[0], c = x.shape[1]
    cdef isize h = x.shape[2], w = x.shape[3]
    cdef isize hh = h // 2, ww = w // 2
    dt = np.float32 if real is float else np.float64
    yout = np.empty((n, c, hh, ww), dtype=dt)
    iout = np.empty((n, c, hh, ww), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = yout
    cdef unsigned char[:, :, :, ::1] idx = iout
    cdef isize b, ch, i, j, pos, best, nc
    cdef real v, m
    with nogil:
        for nc in prange(n * c, schedule="static"):
            b = nc // c
            ch = nc % c
            for i in range(hh):
                for j in range(ww):
                    best = 0
                    m = x[b, ch, 2 * i, 2 * j]
                    for pos in range(1, 4):
                        v = x[b, ch, 2 * i + (pos >> 1), 2 * j + (pos & 1)]
                        if v > m:
                            m = v
                            best = pos
                    y[b, ch, i, j] = m
                    idx[b, ch, i, j] = <unsigned char> best
    return yout, iout


def pool2_gather(real[:, :, :, ::1] x, unsigned char[:, :, :, ::1] idx):
    cdef isize n = x.shape[0], c = x.shape[1]
    cdef isize hh = idx.shape[2], ww = idx.shape[3]
    out = np.empty((n, c, hh, ww), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] y = out
    cdef isize b, ch, i, j, pos, nc
    with nogil:
        for nc in prange(n * c, schedule="static"):
            b = nc // c
            ch = nc % c
            for i in range(hh):
                for j in range(ww):
                    pos = idx[b, ch, i, j]
                    y[b, ch, i, j] = x[b, ch, 2 * i + (pos >> 1), 2 * j + (pos & 1)]
    return out


def pool2_scatter(real[:, :, :, ::1] y, unsigned char[:, :, :, ::1] idx,
                  int h, int w):
    cdef isize n = y.shape[0], c = y.shape[1]
    cdef isize hh = y.shape[2], ww = y.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] x = out
    cdef isize b, ch, i, j, pos, nc
    with nogil:
        for nc in prange(n * c, schedule="static"):
            b = nc // c
            ch = nc % c
            for i in range(hh):
                for j in range(ww):
                    pos = idx[b, ch, i, j]
                    x[b, ch, 2 * i + (pos >> 1), 2 * j + (pos & 1)] = y[b, ch, i, j]
    return out
