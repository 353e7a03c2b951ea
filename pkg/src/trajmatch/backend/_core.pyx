# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the hot inner loops.

Same contract as `trajmatch.backend.numpy_impl`: NHWC patch extraction
(im2col/col2im), NHWC 2x2 max pooling, and time-gradient polyline
rasterization. Loop accumulation orders and float expressions match the
NumPy fallback exactly so both backends produce bit-identical arrays
(build flags disable FP contraction for the same reason). Kernels are
single-threaded on purpose: they are bandwidth-bound, and worker threads
here would contend with the BLAS threads the convolution GEMMs rely on.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor
from libc.string cimport memcpy

cnp.import_array()

NAME = "cython"


def im2col(x_in, Py_ssize_t kh, Py_ssize_t kw, out=None):
    """x [N,H,W,C] -> patch rows [N*OH*OW, kh*kw*C], feature order (i, j, c).

    Pass a preallocated `out` to avoid large-allocation churn in hot loops.
    """
    x_in = np.ascontiguousarray(x_in)
    n, h, w, c = x_in.shape
    shape = (n * (h - kh + 1) * (w - kw + 1), kh * kw * c)
    if out is None:
        out = np.empty(shape, dtype=x_in.dtype)
    elif out.shape != shape or out.dtype != x_in.dtype:
        raise ValueError(f"im2col out buffer mismatch: {out.shape} vs {shape}")
    if x_in.dtype == np.float32:
        _im2col_f32(x_in, kh, kw, out)
    else:
        _im2col_f64(x_in, kh, kw, out)
    return out


cdef _im2col_impl(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                  floating[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    cdef Py_ssize_t b, oy, ox, i, row, kwc = kw * c
    # each patch row is kh contiguous strips of kw*c floats (x is C-contiguous)
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    for i in range(kh):
                        memcpy(&out[row, i * kwc], &x[b, oy + i, ox, 0],
                               kwc * sizeof(floating))


def _im2col_f32(float[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                float[:, ::1] out):
    _im2col_impl(x, kh, kw, out)


def _im2col_f64(double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                double[:, ::1] out):
    _im2col_impl(x, kh, kw, out)


def col2im(cols_in, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw, out=None):
    """Adjoint of im2col: scatter-add patch rows onto [N,H,W,C]."""
    if out is None:
        out = np.zeros((n, h, w, c), dtype=cols_in.dtype)
    else:
        if out.shape != (n, h, w, c) or out.dtype != cols_in.dtype:
            raise ValueError("col2im out buffer mismatch")
        out.fill(0)
    if cols_in.dtype == np.float32:
        _col2im_f32(cols_in, n, h, w, c, kh, kw, out)
    else:
        _col2im_f64(cols_in, n, h, w, c, kh, kw, out)
    return out


cdef _col2im_impl(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
                  Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw,
                  floating[:, :, :, ::1] out) :
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    cdef Py_ssize_t b, oy, ox, i, j, ci, row0, colbase
    # (i, j) outermost so each target element accumulates in the same order
    # as the fallback's shifted-slab adds
    with nogil:
        for b in range(n):
            for i in range(kh):
                for j in range(kw):
                    colbase = (i * kw + j) * c
                    for oy in range(oh):
                        row0 = (b * oh + oy) * ow
                        for ox in range(ow):
                            for ci in range(c):
                                out[b, oy + i, ox + j, ci] += cols[row0 + ox, colbase + ci]


def _col2im_f32(float[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
                Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw, float[:, :, :, ::1] out):
    _col2im_impl(cols, n, h, w, c, kh, kw, out)


def _col2im_f64(double[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
                Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw, double[:, :, :, ::1] out):
    _col2im_impl(cols, n, h, w, c, kh, kw, out)


def maxpool2_forward(x_in, out_y=None, out_idx=None):
    """NHWC 2x2 stride-2 max pool; idx in {0,1,2,3} row-major, first max wins."""
    n, h, w, c = x_in.shape
    oh, ow = h // 2, w // 2
    if out_y is None:
        out_y = np.empty((n, oh, ow, c), dtype=x_in.dtype)
    if out_idx is None:
        out_idx = np.empty((n, oh, ow, c), dtype=np.uint8)
    if x_in.dtype == np.float32:
        _maxpool2_forward_f32(x_in, out_y, out_idx)
    else:
        _maxpool2_forward_f64(x_in, out_y, out_idx)
    return out_y, out_idx


cdef _maxpool2_forward_impl(floating[:, :, :, ::1] x, floating[:, :, :, ::1] y,
                            cnp.uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    cdef Py_ssize_t b, oy, ox, ci
    cdef floating best, v
    cdef cnp.uint8_t kbest
    cdef const floating *r0
    cdef const floating *r1
    cdef floating *yp
    cdef cnp.uint8_t *ip
    # candidate order (0,0),(0,1),(1,0),(1,1): first strict maximum wins ties
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    r0 = &x[b, 2 * oy, 2 * ox, 0]
                    r1 = &x[b, 2 * oy + 1, 2 * ox, 0]
                    yp = &y[b, oy, ox, 0]
                    ip = &idx[b, oy, ox, 0]
                    for ci in range(c):
                        best = r0[ci]
                        kbest = 0
                        v = r0[c + ci]
                        if v > best:
                            best = v; kbest = 1
                        v = r1[ci]
                        if v > best:
                            best = v; kbest = 2
                        v = r1[c + ci]
                        if v > best:
                            best = v; kbest = 3
                        yp[ci] = best
                        ip[ci] = kbest


def _maxpool2_forward_f32(float[:, :, :, ::1] x, float[:, :, :, ::1] y,
                          cnp.uint8_t[:, :, :, ::1] idx):
    _maxpool2_forward_impl(x, y, idx)


def _maxpool2_forward_f64(double[:, :, :, ::1] x, double[:, :, :, ::1] y,
                          cnp.uint8_t[:, :, :, ::1] idx):
    _maxpool2_forward_impl(x, y, idx)


def maxpool2_backward(dy_in, idx_in, Py_ssize_t h, Py_ssize_t w, out=None):
    n, oh, ow, c = dy_in.shape
    if out is None:
        out = np.zeros((n, h, w, c), dtype=dy_in.dtype)
    else:
        out.fill(0)
    if dy_in.dtype == np.float32:
        _maxpool2_backward_f32(dy_in, idx_in, out)
    else:
        _maxpool2_backward_f64(dy_in, idx_in, out)
    return out


cdef _maxpool2_backward_impl(floating[:, :, :, ::1] dy, cnp.uint8_t[:, :, :, ::1] idx,
                             floating[:, :, :, ::1] dx):
    cdef Py_ssize_t n = dy.shape[0], oh = dy.shape[1], ow = dy.shape[2], c = dy.shape[3]
    cdef Py_ssize_t b, oy, ox, ci, k
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for ci in range(c):
                        k = idx[b, oy, ox, ci]
                        dx[b, 2 * oy + k // 2, 2 * ox + k % 2, ci] = dy[b, oy, ox, ci]


def _maxpool2_backward_f32(float[:, :, :, ::1] dy, cnp.uint8_t[:, :, :, ::1] idx,
                           float[:, :, :, ::1] dx):
    _maxpool2_backward_impl(dy, idx, dx)


def _maxpool2_backward_f64(double[:, :, :, ::1] dy, cnp.uint8_t[:, :, :, ::1] idx,
                           double[:, :, :, ::1] dx):
    _maxpool2_backward_impl(dy, idx, dx)


cdef inline void _color(double t, cnp.uint8_t* rgb) nogil:
    cdef double h = 240.0 * (1.0 - t)
    cdef double r, g, b
    if h < 60.0:
        r = 1.0; g = h / 60.0; b = 0.0
    elif h < 120.0:
        r = (120.0 - h) / 60.0; g = 1.0; b = 0.0
    elif h < 180.0:
        r = 0.0; g = 1.0; b = (h - 120.0) / 60.0
    else:
        r = 0.0; g = (240.0 - h) / 60.0; b = 1.0
    rgb[0] = <cnp.uint8_t> floor(r * 255.0 + 0.5)
    rgb[1] = <cnp.uint8_t> floor(g * 255.0 + 0.5)
    rgb[2] = <cnp.uint8_t> floor(b * 255.0 + 0.5)


def colormap_u8(double[:] ts):
    cdef Py_ssize_t n = ts.shape[0], i
    out_arr = np.empty((n, 3), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            _color(ts[i], &out[i, 0])
    return out_arr


cdef inline void _put(cnp.uint8_t[:, :, ::1] img, Py_ssize_t yy, Py_ssize_t xx,
                      double t) nogil:
    _color(t, &img[yy, xx, 0])


cdef void _segment(cnp.uint8_t[:, :, ::1] img, long long x0, long long y0,
                   long long x1, long long y1, double t0, double t1) nogil:
    cdef long long adx = x1 - x0 if x1 >= x0 else x0 - x1
    cdef long long ady = y1 - y0 if y1 >= y0 else y0 - y1
    cdef long long n = adx if adx >= ady else ady
    if n == 0:
        return
    cdef long long sx = 1 if x1 >= x0 else -1
    cdef long long sy = 1 if y1 >= y0 else -1
    cdef long long j, xp, yp
    cdef double t
    for j in range(n + 1):
        if adx >= ady:
            xp = x0 + sx * j
            yp = y0 + sy * ((2 * j * ady + adx) // (2 * adx))
        else:
            yp = y0 + sy * j
            xp = x0 + sx * ((2 * j * adx + ady) // (2 * ady))
        t = t0 + (t1 - t0) * (<double> j / <double> n)
        _put(img, <Py_ssize_t> yp, <Py_ssize_t> xp, t)


def draw_polyline(cnp.uint8_t[:, :, ::1] img, cnp.int64_t[:] xs, cnp.int64_t[:] ys,
                  double[:] ts, cnp.uint8_t[:] seg_mask):
    """Paint dots and gap-masked segments in time order; see numpy_impl."""
    cdef Py_ssize_t n = xs.shape[0], i
    with nogil:
        for i in range(n):
            _put(img, <Py_ssize_t> ys[i], <Py_ssize_t> xs[i], ts[i])
            if i + 1 < n and seg_mask[i]:
                _segment(img, xs[i], ys[i], xs[i + 1], ys[i + 1], ts[i], ts[i + 1])
