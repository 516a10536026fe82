# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im convolution, max pooling, upsampling.

Mirrors ``_kernels_py`` function by function.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def same_padding(Py_ssize_t k):
    cdef Py_ssize_t before = (k - 1) // 2
    return before, k - 1 - before


cdef _im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    """Rows are output positions (n, r, q); columns are taps (c, i, j)."""
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t pt = (kh - 1) // 2, pl = (kw - 1) // 2
    cdef Py_ssize_t s, c, i, j, r, q, rr, qq, row, col
    cols_arr = np.zeros((n * h * wd, ci * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    with nogil:
        for s in range(n):
            for r in range(h):
                for q in range(wd):
                    row = (s * h + r) * wd + q
                    col = 0
                    for c in range(ci):
                        for i in range(kh):
                            rr = r + i - pt
                            for j in range(kw):
                                qq = q + j - pl
                                if rr >= 0 and rr < h and qq >= 0 and qq < wd:
                                    cols[row, col] = x[s, c, rr, qq]
                                col = col + 1
    return cols_arr


cdef _col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t ci, Py_ssize_t h, Py_ssize_t wd,
             Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t pt = (kh - 1) // 2, pl = (kw - 1) // 2
    cdef Py_ssize_t s, c, i, j, r, q, rr, qq, row, col
    gx_arr = np.zeros((n, ci, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    with nogil:
        for s in range(n):
            for r in range(h):
                for q in range(wd):
                    row = (s * h + r) * wd + q
                    col = 0
                    for c in range(ci):
                        for i in range(kh):
                            rr = r + i - pt
                            for j in range(kw):
                                qq = q + j - pl
                                if rr >= 0 and rr < h and qq >= 0 and qq < wd:
                                    gx[s, c, rr, qq] += cols[row, col]
                                col = col + 1
    return gx_arr


# below this many output channels the direct loop beats im2col + gemm
DIRECT_MAX_CO = 4


cdef _direct_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[::1] b):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t pt = (kh - 1) // 2, pl = (kw - 1) // 2
    cdef Py_ssize_t s, o, c, i, j, r, q, rr, q0, q1
    cdef double wv
    out = np.empty((n, co, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    with nogil:
        for s in range(n):
            for o in range(co):
                for r in range(h):
                    for q in range(wd):
                        y[s, o, r, q] = b[o]
                for c in range(ci):
                    for i in range(kh):
                        for r in range(h):
                            rr = r + i - pt
                            if rr < 0 or rr >= h:
                                continue
                            for j in range(kw):
                                wv = w[o, c, i, j]
                                q0 = pl - j
                                if q0 < 0:
                                    q0 = 0
                                q1 = wd + pl - j
                                if q1 > wd:
                                    q1 = wd
                                for q in range(q0, q1):
                                    y[s, o, r, q] += wv * x[s, c, rr, q + j - pl]
    return out


cdef _direct_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[:, :, :, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t pt = (kh - 1) // 2, pl = (kw - 1) // 2
    cdef Py_ssize_t s, o, c, i, j, r, q, rr, q0, q1
    cdef double wv, acc, g
    gx_arr = np.zeros((n, ci, h, wd), dtype=np.float64)
    gw_arr = np.zeros((co, ci, kh, kw), dtype=np.float64)
    gb_arr = np.zeros(co, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for s in range(n):
            for o in range(co):
                acc = 0.0
                for r in range(h):
                    for q in range(wd):
                        acc = acc + gy[s, o, r, q]
                gb[o] += acc
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            q0 = pl - j
                            if q0 < 0:
                                q0 = 0
                            q1 = wd + pl - j
                            if q1 > wd:
                                q1 = wd
                            wv = w[o, c, i, j]
                            acc = 0.0
                            for r in range(h):
                                rr = r + i - pt
                                if rr < 0 or rr >= h:
                                    continue
                                for q in range(q0, q1):
                                    g = gy[s, o, r, q]
                                    acc = acc + g * x[s, c, rr, q + j - pl]
                                    gx[s, c, rr, q + j - pl] += g * wv
                            gw[o, c, i, j] += acc
    return gx_arr, gw_arr, gb_arr


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[::1] b):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if co <= DIRECT_MAX_CO:
        return _direct_forward(x, w, b)
    cols = _im2col(x, kh, kw)
    wmat = np.asarray(w).reshape(co, -1)
    y = cols @ wmat.T
    y += np.asarray(b)
    return np.ascontiguousarray(y.reshape(n, h, wd, co).transpose(0, 3, 1, 2))


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[:, :, :, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if co <= DIRECT_MAX_CO:
        return _direct_backward(x, w, gy)
    cols = _im2col(x, kh, kw)
    gmat = np.ascontiguousarray(np.asarray(gy).transpose(0, 2, 3, 1)).reshape(-1, co)
    wmat = np.asarray(w).reshape(co, -1)
    gw = (gmat.T @ cols).reshape(co, ci, kh, kw)
    gb = gmat.sum(axis=0)
    gx = _col2im(gmat @ wmat, n, ci, h, wd, kh, kw)
    return gx, gw, gb


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oh = (h + ph - 1) // ph, ow = (wd + pw - 1) // pw
    cdef Py_ssize_t s, k, a, bcol, r, q, best
    cdef double m, v
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] y = out
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    with nogil:
        for s in range(n):
            for k in range(c):
                for a in range(oh):
                    for bcol in range(ow):
                        best = -1
                        m = 0.0
                        for r in range(a * ph, min(a * ph + ph, h)):
                            for q in range(bcol * pw, min(bcol * pw + pw, wd)):
                                v = x[s, k, r, q]
                                # strict '>' keeps the first row-major maximum
                                if best < 0 or v > m:
                                    m = v
                                    best = r * wd + q
                        y[s, k, a, bcol] = m
                        idx[s, k, a, bcol] = best
    return out, idx_arr


def maxpool_backward(const double[:, :, :, ::1] gy, const cnp.int64_t[:, :, :, ::1] idx, in_shape):
    cdef Py_ssize_t n = in_shape[0], c = in_shape[1], h = in_shape[2], wd = in_shape[3]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t s, k, a, bcol, t
    gx_arr = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    with nogil:
        for s in range(n):
            for k in range(c):
                for a in range(oh):
                    for bcol in range(ow):
                        t = idx[s, k, a, bcol]
                        gx[s, k, t // wd, t % wd] += gy[s, k, a, bcol]
    return gx_arr


def upsample_forward(const double[:, :, :, ::1] x, Py_ssize_t fh, Py_ssize_t fw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t s, k, r, q
    out = np.empty((n, c, h * fh, wd * fw), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    with nogil:
        for s in range(n):
            for k in range(c):
                for r in range(h * fh):
                    for q in range(wd * fw):
                        y[s, k, r, q] = x[s, k, r // fh, q // fw]
    return out


def upsample_backward(const double[:, :, :, ::1] gy, Py_ssize_t fh, Py_ssize_t fw):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], h = gy.shape[2], wd = gy.shape[3]
    cdef Py_ssize_t s, k, r, q
    gx_arr = np.zeros((n, c, h // fh, wd // fw), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    with nogil:
        for s in range(n):
            for k in range(c):
                for r in range(h):
                    for q in range(wd):
                        gx[s, k, r // fh, q // fw] += gy[s, k, r, q]
    return gx_arr
