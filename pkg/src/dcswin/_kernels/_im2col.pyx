# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im with padding handled in-kernel (no padded copy)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating_t:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride,
                                 Py_ssize_t padding, Py_ssize_t dilation) nogil:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


cdef inline Py_ssize_t _floordiv(Py_ssize_t a, Py_ssize_t b) nogil:
    # b > 0; C division truncates toward zero
    return a // b if a >= 0 else -((-a + b - 1) // b)


cdef inline void _valid_range(Py_ssize_t offset, Py_ssize_t size, Py_ssize_t out,
                              Py_ssize_t stride, Py_ssize_t *lo, Py_ssize_t *hi) nogil:
    """Output indices o in [lo, hi) with 0 <= o * stride + offset < size."""
    lo[0] = max(0, -_floordiv(offset, stride))
    hi[0] = min(out, _floordiv(size - 1 - offset, stride) + 1)
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def _im2col(floating_t[:, :, :, ::1] x, floating_t[:, :, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
            Py_ssize_t padding, Py_ssize_t dilation):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, padding, dilation)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, padding, dilation)
    cdef Py_ssize_t b, c, i, j, oh, ow, hin, w0, lo, hi
    cdef floating_t *dst
    cdef const floating_t *src
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        dst = &cols[b, (c * kh + i) * kw + j, 0]
                        w0 = j * dilation - padding
                        _valid_range(w0, W, Wo, stride, &lo, &hi)
                        for oh in range(Ho):
                            hin = oh * stride - padding + i * dilation
                            if hin < 0 or hin >= H:
                                for ow in range(Wo):
                                    dst[ow] = 0
                            else:
                                src = &x[b, c, hin, 0]
                                for ow in range(lo):
                                    dst[ow] = 0
                                if stride == 1:
                                    for ow in range(lo, hi):
                                        dst[ow] = src[ow + w0]
                                else:
                                    for ow in range(lo, hi):
                                        dst[ow] = src[ow * stride + w0]
                                for ow in range(hi, Wo):
                                    dst[ow] = 0
                            dst += Wo


def _col2im(floating_t[:, :, ::1] cols, floating_t[:, :, :, ::1] out,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
            Py_ssize_t padding, Py_ssize_t dilation):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, padding, dilation)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, padding, dilation)
    cdef Py_ssize_t b, c, i, j, oh, ow, hin, w0, lo, hi
    cdef const floating_t *src
    cdef floating_t *dst
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        src = &cols[b, (c * kh + i) * kw + j, 0]
                        w0 = j * dilation - padding
                        _valid_range(w0, W, Wo, stride, &lo, &hi)
                        for oh in range(Ho):
                            hin = oh * stride - padding + i * dilation
                            if hin >= 0 and hin < H:
                                dst = &out[b, c, hin, 0]
                                if stride == 1:
                                    for ow in range(lo, hi):
                                        dst[ow + w0] += src[ow]
                                else:
                                    for ow in range(lo, hi):
                                        dst[ow * stride + w0] += src[ow]
                            src += Wo


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t padding,
           Py_ssize_t dilation):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho = _out_size(H, kh, stride, padding, dilation)
    Wo = _out_size(W, kw, stride, padding, dilation)
    cols = np.empty((B, C * kh * kw, Ho * Wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, padding, dilation)
    return cols


def col2im(cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t dilation):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], C, H, W), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, padding, dilation)
    return out
