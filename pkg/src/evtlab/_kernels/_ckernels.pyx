# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Loop order mirrors ``_pykernels`` so forward results match bitwise."""

import numpy as np

cimport cython


def bmm(const double[:, :, ::1] a, const double[:, :, ::1] b):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2]
    cdef Py_ssize_t bi, i, t, j
    cdef double av
    out = np.zeros((nb, m, n))
    cdef double[:, :, ::1] c = out
    with nogil:
        for bi in range(nb):
            for i in range(m):
                for t in range(k):
                    av = a[bi, i, t]
                    for j in range(n):
                        c[bi, i, j] = c[bi, i, j] + av * b[bi, t, j]
    return out


def dwconv2d(const double[:, :, :, ::1] x, const double[:, :, ::1] w, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t bi, ci, oy, ox, i, j, iy, ix
    cdef double s
    out = np.zeros((nb, nc, ho, wo))
    cdef double[:, :, :, ::1] o = out
    with nogil:
        for bi in range(nb):
            for ci in range(nc):
                for oy in range(ho):
                    for ox in range(wo):
                        s = 0.0
                        for i in range(kh):
                            iy = oy * stride + i - pad
                            for j in range(kw):
                                ix = ox * stride + j - pad
                                if iy < 0 or iy >= h or ix < 0 or ix >= wd:
                                    s = s + w[ci, i, j] * 0.0
                                else:
                                    s = s + w[ci, i, j] * x[bi, ci, iy, ix]
                        o[bi, ci, oy, ox] = s
    return out


def dwconv2d_grad_input(const double[:, :, :, ::1] g, const double[:, :, ::1] w, tuple x_shape,
                        Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t nb = x_shape[0], nc = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t bi, ci, oy, ox, i, j, iy, ix
    out = np.zeros((nb, nc, h, wd))
    cdef double[:, :, :, ::1] dx = out
    with nogil:
        for bi in range(nb):
            for ci in range(nc):
                for i in range(kh):
                    for j in range(kw):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= wd:
                                    continue
                                dx[bi, ci, iy, ix] = dx[bi, ci, iy, ix] + w[ci, i, j] * g[bi, ci, oy, ox]
    return out


def dwconv2d_grad_weight(const double[:, :, :, ::1] g, const double[:, :, :, ::1] x, tuple w_shape,
                         Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = w_shape[1], kw = w_shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t bi, ci, oy, ox, i, j, iy, ix
    cdef double s
    out = np.zeros(w_shape)
    cdef double[:, :, ::1] dw = out
    with nogil:
        for ci in range(nc):
            for i in range(kh):
                for j in range(kw):
                    s = 0.0
                    for bi in range(nb):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= wd:
                                    continue
                                s = s + g[bi, ci, oy, ox] * x[bi, ci, iy, ix]
                    dw[ci, i, j] = s
    return out
