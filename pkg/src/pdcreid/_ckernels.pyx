# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Loop orders mirror the numpy versions so both backends agree to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (n + 2 * p - k) // s + 1


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
           Py_ssize_t ph, Py_ssize_t pw, double fill=0.0):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = _out_size(h, kh, sh, ph), wo = _out_size(w, kw, sw, pw)
    out = np.empty((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, base, lo, hi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        # columns ox in [lo, hi) read inside the image
                        lo = 0
                        while lo < wo and lo * sw - pw + j < 0:
                            lo += 1
                        hi = lo
                        while hi < wo and hi * sw - pw + j < w:
                            hi += 1
                        for oy in range(ho):
                            iy = oy * sh - ph + i
                            base = oy * wo
                            if iy < 0 or iy >= h:
                                for ox in range(wo):
                                    ov[b, row, base + ox] = fill
                                continue
                            for ox in range(lo):
                                ov[b, row, base + ox] = fill
                            for ox in range(lo, hi):
                                ov[b, row, base + ox] = xv[b, ch, iy, ox * sw - pw + j]
                            for ox in range(hi, wo):
                                ov[b, row, base + ox] = fill
    return out


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
           Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = _out_size(h, kh, sh, ph), wo = _out_size(w, kw, sw, pw)
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(n, c * kh * kw, ho * wo)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy * sh - ph + i
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * sw - pw + j
                                if 0 <= ix < w:
                                    xv[b, ch, iy, ix] += cv[b, row, oy * wo + ox]
    return out


def maxpool_forward(x, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = _out_size(h, k, s, p), wo = _out_size(w, k, s, p)
    y = np.empty((n, c, ho, wo), dtype=np.float64)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] yv = y
    cdef cnp.int64_t[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, ch, oy, ox, i, j, iy, ix, best_i
    cdef double best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = -INFINITY
                        best_i = -1
                        for i in range(k):
                            iy = oy * s - p + i
                            for j in range(k):
                                ix = ox * s - p + j
                                if 0 <= iy < h and 0 <= ix < w:
                                    v = xv[b, ch, iy, ix]
                                else:
                                    v = -INFINITY
                                if best_i < 0 or v > best:
                                    best = v
                                    best_i = iy * w + ix
                        yv[b, ch, oy, ox] = best
                        iv[b, ch, oy, ox] = best_i
    return y, idx


def maxpool_backward(grad, idx, x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef cnp.int64_t[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    out = np.zeros((n, c, h * w), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, oy, ox
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(gv.shape[2]):
                    for ox in range(gv.shape[3]):
                        ov[b, ch, iv[b, ch, oy, ox]] += gv[b, ch, oy, ox]
    return out.reshape(n, c, h, w)


cdef inline bint _corners(double px, double py, Py_ssize_t h, Py_ssize_t w,
                          Py_ssize_t* x0, Py_ssize_t* x1, Py_ssize_t* y0, Py_ssize_t* y1,
                          double* wx, double* wy) nogil:
    if not (px >= 0.0 and px <= w - 1 and py >= 0.0 and py <= h - 1):
        return False
    cdef Py_ssize_t fx = <Py_ssize_t>floor(px)
    cdef Py_ssize_t fy = <Py_ssize_t>floor(py)
    if fx > w - 2:
        fx = w - 2
    if fx < 0:
        fx = 0
    if fy > h - 2:
        fy = h - 2
    if fy < 0:
        fy = 0
    x0[0] = fx
    y0[0] = fy
    x1[0] = fx + 1 if fx + 1 < w else w - 1
    y1[0] = fy + 1 if fy + 1 < h else h - 1
    wx[0] = px - fx
    wy[0] = py - fy
    return True


def bilinear_forward(img, px, py):
    cdef double[:, :, ::1] iv = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[::1] xs = np.ascontiguousarray(px, dtype=np.float64).reshape(-1)
    cdef double[::1] ys = np.ascontiguousarray(py, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t c = iv.shape[0], h = iv.shape[1], w = iv.shape[2], npts = xs.shape[0]
    out = np.zeros((c, npts), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t q, ch, x0, x1, y0, y1
    cdef double wx, wy, top, bot
    with nogil:
        for q in range(npts):
            if not _corners(xs[q], ys[q], h, w, &x0, &x1, &y0, &y1, &wx, &wy):
                continue
            for ch in range(c):
                top = (1.0 - wx) * iv[ch, y0, x0] + wx * iv[ch, y0, x1]
                bot = (1.0 - wx) * iv[ch, y1, x0] + wx * iv[ch, y1, x1]
                ov[ch, q] = (1.0 - wy) * top + wy * bot
    return out


def bilinear_backward(img, px, py, grad):
    cdef double[:, :, ::1] iv = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[::1] xs = np.ascontiguousarray(px, dtype=np.float64).reshape(-1)
    cdef double[::1] ys = np.ascontiguousarray(py, dtype=np.float64).reshape(-1)
    cdef double[:, ::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef Py_ssize_t c = iv.shape[0], h = iv.shape[1], w = iv.shape[2], npts = xs.shape[0]
    gimg = np.zeros((c, h, w), dtype=np.float64)
    gpx = np.zeros(npts, dtype=np.float64)
    gpy = np.zeros(npts, dtype=np.float64)
    cdef double[:, :, ::1] giv = gimg
    cdef double[::1] gxv = gpx
    cdef double[::1] gyv = gpy
    cdef Py_ssize_t q, ch, x0, x1, y0, y1
    cdef double wx, wy, g, v00, v01, v10, v11, ax, ay
    with nogil:
        for q in range(npts):
            if not _corners(xs[q], ys[q], h, w, &x0, &x1, &y0, &y1, &wx, &wy):
                continue
            ax = 0.0
            ay = 0.0
            for ch in range(c):
                g = gv[ch, q]
                giv[ch, y0, x0] += g * ((1.0 - wy) * (1.0 - wx))
                giv[ch, y0, x1] += g * ((1.0 - wy) * wx)
                giv[ch, y1, x0] += g * (wy * (1.0 - wx))
                giv[ch, y1, x1] += g * (wy * wx)
                v00 = iv[ch, y0, x0]
                v01 = iv[ch, y0, x1]
                v10 = iv[ch, y1, x0]
                v11 = iv[ch, y1, x1]
                ax += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10))
                ay += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01))
            gxv[q] = ax
            gyv[q] = ay
    return gimg, gpx, gpy
