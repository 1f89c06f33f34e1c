# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in :mod:`segdet._kernels_py`."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def shift_accumulate(real[:, :, ::1] z, const long long[::1] offsets, Py_ssize_t length):
    cdef Py_ssize_t k = z.shape[0], f = z.shape[1]
    cdef Py_ssize_t i, j, n, o
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((f, length), dtype=dtype)
    cdef real[:, ::1] y = out
    cdef real *yr
    cdef real *zr
    with nogil:
        for j in range(f):
            yr = &y[j, 0]
            for i in range(k):
                o = offsets[i]
                zr = &z[i, j, o]
                for n in range(length):
                    yr[n] += zr[n]
    return out


def shift_scatter(real[:, :, ::1] z, const long long[::1] offsets, Py_ssize_t size):
    cdef Py_ssize_t k = z.shape[0], c = z.shape[1], length = z.shape[2]
    cdef Py_ssize_t i, j, n, o
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c, size), dtype=dtype)
    cdef real[:, ::1] x = out
    cdef real *xr
    cdef real *zr
    with nogil:
        for j in range(c):
            for i in range(k):
                o = offsets[i]
                xr = &x[j, o]
                zr = &z[i, j, 0]
                for n in range(length):
                    xr[n] += zr[n]
    return out


def maxpool_forward(real[:, :, :, ::1] x, window):
    cdef Py_ssize_t wd = window[0], wh = window[1], ww = window[2]
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t od = x.shape[1] // wd, oh = x.shape[2] // wh, ow = x.shape[3] // ww
    dtype = np.float32 if real is float else np.float64
    out = np.empty((m, od, oh, ow), dtype=dtype)
    arg = np.empty((m, od, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] y = out
    cdef long long[:, :, :, ::1] idx = arg
    cdef Py_ssize_t b, d, h, w, a, e, c, best_i, pos
    cdef real best, v
    with nogil:
        for b in range(m):
            for d in range(od):
                for h in range(oh):
                    for w in range(ow):
                        best = x[b, d * wd, h * wh, w * ww]
                        best_i = 0
                        pos = 0
                        for a in range(wd):
                            for e in range(wh):
                                for c in range(ww):
                                    v = x[b, d * wd + a, h * wh + e, w * ww + c]
                                    if v > best:
                                        best = v
                                        best_i = pos
                                    pos += 1
                        y[b, d, h, w] = best
                        idx[b, d, h, w] = best_i
    return out, arg


def maxpool_backward(real[:, :, :, ::1] gy, const long long[:, :, :, ::1] idx, window):
    cdef Py_ssize_t wd = window[0], wh = window[1], ww = window[2]
    cdef Py_ssize_t m = gy.shape[0], od = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((m, od * wd, oh * wh, ow * ww), dtype=dtype)
    cdef real[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, d, h, w, p, a, e, c
    with nogil:
        for b in range(m):
            for d in range(od):
                for h in range(oh):
                    for w in range(ow):
                        p = idx[b, d, h, w]
                        c = p % ww
                        e = (p // ww) % wh
                        a = p // (ww * wh)
                        gx[b, d * wd + a, h * wh + e, w * ww + c] = gy[b, d, h, w]
    return out


def nms_sorted(boxes, order, double thresh):
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef long long[::1] od = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t n = bx.shape[0], norder = od.shape[0]
    supp = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] s = supp
    keep = np.empty(norder, dtype=np.int64)
    cdef long long[::1] kp = keep
    cdef Py_ssize_t nk = 0, ii, jj, i, j
    cdef double iw, ih, inter, union, ai, aj
    with nogil:
        for ii in range(norder):
            i = od[ii]
            if s[i]:
                continue
            kp[nk] = i
            nk += 1
            ai = (bx[i, 2] - bx[i, 0]) * (bx[i, 3] - bx[i, 1])
            for jj in range(ii + 1, norder):
                j = od[jj]
                if s[j]:
                    continue
                iw = min(bx[i, 2], bx[j, 2]) - max(bx[i, 0], bx[j, 0])
                ih = min(bx[i, 3], bx[j, 3]) - max(bx[i, 1], bx[j, 1])
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                aj = (bx[j, 2] - bx[j, 0]) * (bx[j, 3] - bx[j, 1])
                union = ai + aj - inter
                if union > 0 and inter / union > thresh:
                    s[j] = 1
    return keep[:nk].copy()
