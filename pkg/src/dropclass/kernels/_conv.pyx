# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im convolution plumbing around BLAS
sgemm, plus fused elementwise kernels for the class-drop branch.

Semantics and layouts match kernels/numpy_backend.py exactly; float32 only.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport sgemm

cnp.import_array()


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                   float alpha, const float* a, int lda,
                   const float* b, int ldb,
                   float beta, float* c, int ldc) noexcept nogil:
    # Row-major C[m,n] = alpha*op(A)op(B) + beta*C via the column-major
    # identity C^T = op(B)^T op(A)^T.
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    sgemm(&ctb, &cta, &n, &m, &k, &alpha,
          <float*> b, &ldb, <float*> a, &lda, &beta, c, &ldc)


cdef inline void _im2col_cell(const float[:, :, :, ::1] x, float[:, ::1] col,
                              Py_ssize_t b, Py_ssize_t i, Py_ssize_t j,
                              Py_ssize_t row, int kh, int kw, int ph, int pw,
                              Py_ssize_t h, Py_ssize_t w, Py_ssize_t c) noexcept nogil:
    cdef Py_ssize_t di, dj, ci, si, sj, base
    for di in range(kh):
        si = i + di - ph
        for dj in range(kw):
            sj = j + dj - pw
            base = (di * kw + dj) * c
            if 0 <= si < h and 0 <= sj < w:
                for ci in range(c):
                    col[row, base + ci] = x[b, si, sj, ci]
            else:
                for ci in range(c):
                    col[row, base + ci] = 0.0


cdef void _im2col(const float[:, :, :, ::1] x, float[:, ::1] col,
                  int kh, int kw, int ph, int pw) noexcept nogil:
    cdef Py_ssize_t b, i, j, di, row, si
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h + 2 * ph - kh + 1, wo = w + 2 * pw - kw + 1
    # columns where the whole kw window lands in-bounds: one memcpy per tap row
    cdef Py_ssize_t run = kw * c
    cdef Py_ssize_t jl = pw if pw < wo else wo
    cdef Py_ssize_t jh = wo - pw
    if jh < jl:
        jh = jl
    for b in range(nb):
        for i in range(ho):
            row = (b * ho + i) * wo
            for j in range(jl):
                _im2col_cell(x, col, b, i, j, row + j, kh, kw, ph, pw, h, w, c)
            for j in range(jl, jh):
                for di in range(kh):
                    si = i + di - ph
                    if 0 <= si < h:
                        memcpy(&col[row + j, di * run], &x[b, si, j - pw, 0],
                               run * sizeof(float))
                    else:
                        memset(&col[row + j, di * run], 0, run * sizeof(float))
            for j in range(jh, wo):
                _im2col_cell(x, col, b, i, j, row + j, kh, kw, ph, pw, h, w, c)


cdef inline void _col2im_cell(const float[:, ::1] gcol, float[:, :, :, ::1] gx,
                              Py_ssize_t b, Py_ssize_t i, Py_ssize_t j,
                              Py_ssize_t row, int kh, int kw, int ph, int pw,
                              Py_ssize_t h, Py_ssize_t w, Py_ssize_t c) noexcept nogil:
    cdef Py_ssize_t di, dj, ci, si, sj, base
    for di in range(kh):
        si = i + di - ph
        if si < 0 or si >= h:
            continue
        for dj in range(kw):
            sj = j + dj - pw
            if sj < 0 or sj >= w:
                continue
            base = (di * kw + dj) * c
            for ci in range(c):
                gx[b, si, sj, ci] += gcol[row, base + ci]


cdef void _col2im_add(const float[:, ::1] gcol, float[:, :, :, ::1] gx,
                      int kh, int kw, int ph, int pw,
                      Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b, i, j, di, t, row, si
    cdef Py_ssize_t nb = gx.shape[0], h = gx.shape[1], w = gx.shape[2], c = gx.shape[3]
    cdef Py_ssize_t run = kw * c
    cdef Py_ssize_t jl = pw if pw < wo else wo
    cdef Py_ssize_t jh = wo - pw
    cdef const float* src
    cdef float* dst
    if jh < jl:
        jh = jl
    for b in range(nb):
        for i in range(ho):
            row = (b * ho + i) * wo
            for j in range(jl):
                _col2im_cell(gcol, gx, b, i, j, row + j, kh, kw, ph, pw, h, w, c)
            for j in range(jl, jh):
                for di in range(kh):
                    si = i + di - ph
                    if si < 0 or si >= h:
                        continue
                    src = &gcol[row + j, di * run]
                    dst = &gx[b, si, j - pw, 0]
                    for t in range(run):
                        dst[t] += src[t]
            for j in range(jh, wo):
                _col2im_cell(gcol, gx, b, i, j, row + j, kh, kw, ph, pw, h, w, c)


def conv2d_forward(cnp.ndarray x, cnp.ndarray k, cnp.ndarray bias, pad):
    cdef int kh = k.shape[0], kw = k.shape[1], ci = k.shape[2], co = k.shape[3]
    cdef int ph = pad[0], pw = pad[1]
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = h + 2 * ph - kh + 1, wo = w + 2 * pw - kw + 1
    cdef Py_ssize_t m = nb * ho * wo
    cdef int ck = kh * kw * ci

    y = np.empty((nb, ho, wo, co), dtype=np.float32)
    y[...] = bias  # sgemm accumulates on top with beta=1
    cdef float[:, :, :, ::1] ym = y
    cdef float[:, ::1] km2
    cdef float[:, ::1] colm
    cdef const float[:, :, :, ::1] xm = x
    cdef cnp.ndarray col

    kmat = np.ascontiguousarray(k.reshape(ck, co))
    km2 = kmat
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        with nogil:
            _gemm_rm(0, 0, <int> m, co, ci, 1.0,
                     &xm[0, 0, 0, 0], ci, &km2[0, 0], co, 1.0, &ym[0, 0, 0, 0], co)
        return y, None
    col = np.empty((m, ck), dtype=np.float32)
    colm = col
    with nogil:
        _im2col(xm, colm, kh, kw, ph, pw)
        _gemm_rm(0, 0, <int> m, co, ck, 1.0,
                 &colm[0, 0], ck, &km2[0, 0], co, 1.0, &ym[0, 0, 0, 0], co)
    return y, col


def conv2d_backward(cnp.ndarray x, cnp.ndarray k, cnp.ndarray gy, pad, col=None):
    cdef int kh = k.shape[0], kw = k.shape[1], ci = k.shape[2], co = k.shape[3]
    cdef int ph = pad[0], pw = pad[1]
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t m = nb * ho * wo
    cdef int ck = kh * kw * ci

    gb = np.ascontiguousarray(gy.sum(axis=(0, 1, 2)))
    gk = np.zeros((ck, co), dtype=np.float32)
    cdef float[:, ::1] gkm = gk
    cdef const float[:, :, :, ::1] gym = gy
    cdef const float[:, :, :, ::1] xm = x
    cdef float[:, ::1] km2
    cdef float[:, ::1] colm
    cdef float[:, ::1] gcolm
    cdef float[:, :, :, ::1] gxm

    kmat = np.ascontiguousarray(k.reshape(ck, co))
    km2 = kmat

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        gx = np.empty_like(x)
        gxm = gx
        with nogil:
            _gemm_rm(1, 0, ci, co, <int> m, 1.0,
                     &xm[0, 0, 0, 0], ci, &gym[0, 0, 0, 0], co, 0.0, &gkm[0, 0], co)
            _gemm_rm(0, 1, <int> m, ci, co, 1.0,
                     &gym[0, 0, 0, 0], co, &km2[0, 0], co, 0.0, &gxm[0, 0, 0, 0], ci)
        return gx, gk.reshape(1, 1, ci, co), gb

    if col is None:
        col = np.empty((m, ck), dtype=np.float32)
        colm = col
        with nogil:
            _im2col(xm, colm, kh, kw, ph, pw)
    else:
        colm = col
    gcol = np.empty((m, ck), dtype=np.float32)
    gcolm = gcol
    gx = np.zeros_like(x)
    gxm = gx
    with nogil:
        _gemm_rm(1, 0, ck, co, <int> m, 1.0,
                 &colm[0, 0], ck, &gym[0, 0, 0, 0], co, 0.0, &gkm[0, 0], co)
        _gemm_rm(0, 1, <int> m, ck, co, 1.0,
                 &gym[0, 0, 0, 0], co, &km2[0, 0], co, 0.0, &gcolm[0, 0], ck)
        _col2im_add(gcolm, gxm, kh, kw, ph, pw, ho, wo)
    return gx, gk.reshape(kh, kw, ci, co), gb


cdef void _signed_column_sums(const float[:, ::1] sm, int z, float scale,
                              float[::1] psum, float[::1] msum) noexcept nogil:
    # sum_{c != z} relu(a*s_c) is a*psum for a > 0 and a*msum for a < 0,
    # so the per-class loop collapses to one table per feature channel.
    cdef Py_ssize_t j, c
    cdef Py_ssize_t kk = sm.shape[0], nc = sm.shape[1]
    cdef float v
    for j in range(kk):
        psum[j] = 0.0
        msum[j] = 0.0
        for c in range(nc):
            if c == z:
                continue
            v = sm[j, c]
            if v > 0.0:
                psum[j] += v
            elif v < 0.0:
                msum[j] += v
        psum[j] *= scale
        msum[j] *= scale


def drop_aggregate_forward(cnp.ndarray a, cnp.ndarray s, int z, float scale):
    cdef Py_ssize_t kk = a.shape[a.ndim - 1]
    cdef Py_ssize_t n = a.size // kk
    out = np.empty_like(a)
    cdef const float[:, ::1] am = a.reshape(n, kk)
    cdef float[:, ::1] om = out.reshape(n, kk)
    cdef const float[:, ::1] sm = s
    cdef float[::1] psum = np.empty(kk, dtype=np.float32)
    cdef float[::1] msum = np.empty(kk, dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef float av
    with nogil:
        _signed_column_sums(sm, z, scale, psum, msum)
        for i in range(n):
            for j in range(kk):
                av = am[i, j]
                om[i, j] = av * psum[j] if av > 0.0 else av * msum[j]
    return out


def drop_aggregate_backward(cnp.ndarray a, cnp.ndarray s, int z, float scale,
                            cnp.ndarray gout):
    cdef Py_ssize_t kk = a.shape[a.ndim - 1]
    cdef Py_ssize_t n = a.size // kk
    ga = np.empty_like(a)
    cdef const float[:, ::1] am = a.reshape(n, kk)
    cdef const float[:, ::1] gm = gout.reshape(n, kk)
    cdef float[:, ::1] om = ga.reshape(n, kk)
    cdef const float[:, ::1] sm = s
    cdef float[::1] psum = np.empty(kk, dtype=np.float32)
    cdef float[::1] msum = np.empty(kk, dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef float av
    with nogil:
        _signed_column_sums(sm, z, scale, psum, msum)
        for i in range(n):
            for j in range(kk):
                av = am[i, j]
                if av > 0.0:
                    om[i, j] = psum[j] * gm[i, j]
                elif av < 0.0:
                    om[i, j] = msum[j] * gm[i, j]
                else:
                    om[i, j] = 0.0
    return ga


def relu_backward(cnp.ndarray x, cnp.ndarray gy):
    cdef Py_ssize_t n = x.size
    gx = np.empty_like(gy)
    cdef const float[::1] xm = x.reshape(n)
    cdef const float[::1] gm = gy.reshape(n)
    cdef float[::1] om = gx.reshape(n)
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            om[i] = gm[i] if xm[i] > 0.0 else 0.0
    return gx
