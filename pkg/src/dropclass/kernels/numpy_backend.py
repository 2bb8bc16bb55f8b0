"""Pure-numpy reference implementations of the hot kernels.

Every function here mirrors a compiled counterpart in _conv.pyx and is the
fallback when the extension is unavailable. These are also the only
implementations used for float64 inputs (the gradient-check oracle path).

Layout conventions: activations [B, H, W, C], kernels [kh, kw, Cin, Cout],
im2col buffers [B*H*W, kh*kw*Cin] with (di, dj, ci) varying fastest to
slowest matching the kernel's row-major flattening.
"""

from __future__ import annotations

import numpy as np


def _im2col(x: np.ndarray, kh: int, kw: int, ph: int, pw: int) -> np.ndarray:
    b, h, w, ci = x.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win is [B, Ho, Wo, Ci, kh, kw]; reorder to (di, dj, ci) fastest-last
    col = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * ci)
    return np.ascontiguousarray(col)


def conv2d_forward(x, k, bias, pad):
    """Stride-1 convolution; returns (y, col) with col reusable in backward."""
    kh, kw, ci, co = k.shape
    ph, pw = pad
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        y = x.reshape(-1, ci) @ k.reshape(ci, co) + bias
        return y.reshape(x.shape[:3] + (co,)), None
    col = _im2col(x, kh, kw, ph, pw)
    y = col @ k.reshape(-1, co) + bias
    ho = x.shape[1] + 2 * ph - kh + 1
    wo = x.shape[2] + 2 * pw - kw + 1
    return y.reshape(x.shape[0], ho, wo, co), col


def conv2d_backward(x, k, gy, pad, col=None):
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    kh, kw, ci, co = k.shape
    ph, pw = pad
    gb = gy.sum(axis=(0, 1, 2))
    gy_mat = gy.reshape(-1, co)
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        gk = (x.reshape(-1, ci).T @ gy_mat).reshape(k.shape)
        gx = (gy_mat @ k.reshape(ci, co).T).reshape(x.shape)
        return gx, gk, gb
    if col is None:
        col = _im2col(x, kh, kw, ph, pw)
    gk = (col.T @ gy_mat).reshape(k.shape)
    gcol = gy_mat @ k.reshape(-1, co).T
    b, ho, wo = gy.shape[:3]
    gcol = gcol.reshape(b, ho, wo, kh, kw, ci)
    gxp = np.zeros((b, x.shape[1] + 2 * ph, x.shape[2] + 2 * pw, ci), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, di : di + ho, dj : dj + wo, :] += gcol[:, :, :, di, dj, :]
    return gxp[:, ph : ph + x.shape[1], pw : pw + x.shape[2], :], gk, gb


def _signed_column_sums(a, s, z, scale):
    """Per-channel sums of the kept importance columns, split by sign.

    sum_{c != z} relu(a*s_c) collapses to a*psum for positive a and a*msum
    for negative a, where psum/msum sum the positive/negative parts of the
    kept columns; this removes the per-class loop from the hot path.
    """
    s = s.astype(a.dtype, copy=False)
    psum = np.zeros(s.shape[0], dtype=a.dtype)
    msum = np.zeros(s.shape[0], dtype=a.dtype)
    # left-to-right over classes so both backends round identically
    for c in range(s.shape[1]):
        if c == z:
            continue
        col = s[:, c]
        psum += np.maximum(col, 0)
        msum += np.minimum(col, 0)
    psum *= a.dtype.type(scale)
    msum *= a.dtype.type(scale)
    return psum, msum


def drop_aggregate_forward(a, s, z, scale):
    """scale * sum_{c != z} relu(a * s[:, c]), elementwise over channels.

    a is [..., K], s is [K, C]; z = -1 keeps every class.
    """
    psum, msum = _signed_column_sums(a, s, z, scale)
    return np.where(a > 0, a * psum, a * msum)


def drop_aggregate_backward(a, s, z, scale, gout):
    """Gradient of drop_aggregate_forward w.r.t. a (s is a constant)."""
    psum, msum = _signed_column_sums(a, s, z, scale)
    zero = a.dtype.type(0)
    slope = np.where(a > 0, psum, np.where(a < 0, msum, zero))
    return slope * gout


def relu_backward(x, gy):
    return np.where(x > 0, gy, 0).astype(gy.dtype, copy=False)
