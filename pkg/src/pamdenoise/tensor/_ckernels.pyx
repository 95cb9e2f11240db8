# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the loops in ``_pykernels``.

Accumulation order matches the numpy fallback exactly; do not reorder the
loops in ``col2im`` without changing both sides.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.empty((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        col = 0
                        for y in range(ho):
                            for x in range(wo):
                                o[b, row, col] = xp[b, ch, i + y * stride, j + x * stride]
                                col = col + 1
    return out


def col2im(double[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        col = 0
                        for y in range(ho):
                            for x in range(wo):
                                o[b, ch, i + y * stride, j + x * stride] += cols[b, row, col]
                                col = col + 1
    return out


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    out = np.empty((n, c, ho, wo), dtype=np.float64)
    arg = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] o = out
    cdef signed char[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, ch, y, xx
    cdef double best, v
    cdef signed char k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best = x[b, ch, 2 * y, 2 * xx]
                        k = 0
                        v = x[b, ch, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 3
                        o[b, ch, y, xx] = best
                        a[b, ch, y, xx] = k
    return out, arg


def maxpool2_backward(double[:, :, :, ::1] gout, signed char[:, :, :, ::1] arg):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ch, y, xx
    cdef signed char k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        k = arg[b, ch, y, xx]
                        o[b, ch, 2 * y + (k >> 1), 2 * xx + (k & 1)] = gout[b, ch, y, xx]
    return out
