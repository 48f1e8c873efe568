# cython: language_level=3
"""Compiled conv / group-max kernels on contiguous float64 arrays.

Layouts match ``qmdpnet.kernels``: activations are (B, H, W, C) and conv
kernels are (kh, kw, Cin, Cout). Zero inputs are skipped, which pays off on
sparse beliefs; results agree with the numpy path up to summation order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t kh = k.shape[0], kw = k.shape[1], Co = k.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    out_arr = np.zeros((B, H, W, Co), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, di, dj, ii, jj, ci, co
    cdef double v
    with nogil:
        for b in range(B):
            for ii in range(H):
                for jj in range(W):
                    for ci in range(Ci):
                        v = x[b, ii, jj, ci]
                        if v == 0.0:
                            continue
                        # scatter this input into every output it feeds
                        for di in range(kh):
                            i = ii - di + ph
                            if i < 0 or i >= H:
                                continue
                            for dj in range(kw):
                                j = jj - dj + pw
                                if j < 0 or j >= W:
                                    continue
                                for co in range(Co):
                                    out[b, i, j, co] += v * k[di, dj, ci, co]
    return out_arr


def conv2d_backward_input(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] k):
    cdef Py_ssize_t B = gy.shape[0], H = gy.shape[1], W = gy.shape[2], Co = gy.shape[3]
    cdef Py_ssize_t kh = k.shape[0], kw = k.shape[1], Ci = k.shape[2]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    gx_arr = np.zeros((B, H, W, Ci), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, i, j, di, dj, ii, jj, ci, co
    cdef double s
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for di in range(kh):
                        ii = i + di - ph
                        if ii < 0 or ii >= H:
                            continue
                        for dj in range(kw):
                            jj = j + dj - pw
                            if jj < 0 or jj >= W:
                                continue
                            for ci in range(Ci):
                                s = 0.0
                                for co in range(Co):
                                    s = s + gy[b, i, j, co] * k[di, dj, ci, co]
                                gx[b, ii, jj, ci] += s
    return gx_arr


def conv2d_backward_kernel(const double[:, :, :, ::1] x, const double[:, :, :, ::1] gy,
                           Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = gy.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    gk_arr = np.zeros((kh, kw, Ci, Co), dtype=np.float64)
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, i, j, di, dj, ii, jj, ci, co
    cdef double v
    with nogil:
        for b in range(B):
            for ii in range(H):
                for jj in range(W):
                    for ci in range(Ci):
                        v = x[b, ii, jj, ci]
                        if v == 0.0:
                            continue
                        for di in range(kh):
                            i = ii - di + ph
                            if i < 0 or i >= H:
                                continue
                            for dj in range(kw):
                                j = jj - dj + pw
                                if j < 0 or j >= W:
                                    continue
                                for co in range(Co):
                                    gk[di, dj, ci, co] += v * gy[b, i, j, co]
    return gk_arr


def group_max_forward(const double[:, :, :, ::1] x, Py_ssize_t groups):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ct = x.shape[3]
    cdef Py_ssize_t C = Ct // groups
    y_arr = np.empty((B, H, W, groups), dtype=np.float64)
    idx_arr = np.empty((B, H, W, groups), dtype=np.int64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, i, j, g, c, best
    cdef double m, v
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for g in range(groups):
                        best = g * C
                        m = x[b, i, j, best]
                        for c in range(g * C + 1, (g + 1) * C):
                            v = x[b, i, j, c]
                            if v > m:  # strict: ties keep the lowest index
                                m = v
                                best = c
                        y[b, i, j, g] = m
                        idx[b, i, j, g] = best
    return y_arr, idx_arr


def group_max_backward(const double[:, :, :, ::1] gy, const cnp.int64_t[:, :, :, ::1] idx,
                       Py_ssize_t channels):
    cdef Py_ssize_t B = gy.shape[0], H = gy.shape[1], W = gy.shape[2], G = gy.shape[3]
    gx_arr = np.zeros((B, H, W, channels), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, i, j, g
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for g in range(G):
                        gx[b, i, j, idx[b, i, j, g]] += gy[b, i, j, g]
    return gx_arr
