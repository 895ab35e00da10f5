"""Pure-numpy im2col/col2im, used when the compiled extension is unavailable."""

import numpy as np


def _out_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, stride, padding, dilation):
    """Unfold ``x`` of shape (B, C, H, W) into (B, C*kh*kw, Ho*Wo) patch columns."""
    B, C, H, W = x.shape
    Ho = _out_size(H, kh, stride, padding, dilation)
    Wo = _out_size(W, kw, stride, padding, dilation)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    h_span = stride * (Ho - 1) + 1
    w_span = stride * (Wo - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = x[:, :, hi:hi + h_span:stride, wj:wj + w_span:stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, stride, padding, dilation):
    """Adjoint of :func:`im2col`: scatter-add columns back onto a (B, C, H, W) grid."""
    B = cols.shape[0]
    Ho = _out_size(H, kh, stride, padding, dilation)
    Wo = _out_size(W, kw, stride, padding, dilation)
    c = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    h_span = stride * (Ho - 1) + 1
    w_span = stride * (Wo - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            out[:, :, hi:hi + h_span:stride, wj:wj + w_span:stride] += c[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(out)
