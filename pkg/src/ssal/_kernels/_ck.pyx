# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the convolution / pooling hot paths.

Mirrors ``pure.py`` exactly: same patch layout, same per-pixel accumulation
order in the scatter kernels, so outputs are bit-identical to the fallback.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

ctypedef fused real:
    float
    double


def conv_out_hw(h, w, kh, kw, sh, sw, ph, pw):
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return oh, ow


@cython.boundscheck(False)
@cython.wraparound(False)
def _im2col_impl(real[:, :, :, ::1] x, real[:, ::1] cols,
                 Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                 Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ni, ci, oi, oj, ki, kj, ih, iw, row, col
    for ni in range(n):
        for oi in range(oh):
            for oj in range(ow):
                row = (ni * oh + oi) * ow + oj
                for ci in range(c):
                    for ki in range(kh):
                        ih = oi * sh + ki - ph
                        for kj in range(kw):
                            iw = oj * sw + kj - pw
                            col = (ci * kh + ki) * kw + kj
                            if 0 <= ih < h and 0 <= iw < w:
                                cols[row, col] = x[ni, ci, ih, iw]
                            else:
                                cols[row, col] = 0.0


def im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
    x = np.ascontiguousarray(x)
    cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
    _im2col_impl(x, cols, kh, kw, sh, sw, ph, pw, oh, ow)
    return cols


@cython.boundscheck(False)
@cython.wraparound(False)
def _col2im_impl(real[:, ::1] cols, real[:, :, :, ::1] out,
                 Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                 Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ni, ci, oi, oj, ki, kj, ih, iw, row, col
    # (ki, kj) outermost so per-pixel accumulation order matches the fallback
    for ki in range(kh):
        for kj in range(kw):
            for ni in range(n):
                for ci in range(c):
                    col = (ci * kh + ki) * kw + kj
                    for oi in range(oh):
                        ih = oi * sh + ki - ph
                        if ih < 0 or ih >= h:
                            continue
                        for oj in range(ow):
                            iw = oj * sw + kj - pw
                            if 0 <= iw < w:
                                row = (ni * oh + oi) * ow + oj
                                out[ni, ci, ih, iw] += cols[row, col]


def col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw):
    oh, ow = conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
    cols = np.ascontiguousarray(cols)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im_impl(cols, out, kh, kw, sh, sw, ph, pw, oh, ow)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def _maxpool_fwd_impl(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                      cnp.int64_t[:, :, :, ::1] idx,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t ni, ci, oi, oj, ki, kj
    cdef Py_ssize_t best
    cdef real v, cur
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    best = 0
                    v = x[ni, ci, oi * sh, oj * sw]
                    for ki in range(kh):
                        for kj in range(kw):
                            cur = x[ni, ci, oi * sh + ki, oj * sw + kj]
                            if cur > v:  # strict: first max wins, as argmax does
                                v = cur
                                best = ki * kw + kj
                    out[ni, ci, oi, oj] = v
                    idx[ni, ci, oi, oj] = best


def maxpool_forward(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    x = np.ascontiguousarray(x)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    _maxpool_fwd_impl(x, out, idx, kh, kw, sh, sw)
    return out, idx


@cython.boundscheck(False)
@cython.wraparound(False)
def _maxpool_bwd_impl(real[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] idx,
                      real[:, :, :, ::1] out,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t ni, ci, oi, oj
    cdef cnp.int64_t p
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    p = idx[ni, ci, oi, oj]
                    out[ni, ci, oi * sh + p // kw, oj * sw + p % kw] += grad[ni, ci, oi, oj]


def maxpool_backward(grad, idx, h, w, kh, kw, sh, sw):
    n, c, oh, ow = grad.shape
    grad = np.ascontiguousarray(grad)
    idx = np.ascontiguousarray(idx)
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    _maxpool_bwd_impl(grad, idx, out, kh, kw, sh, sw)
    return out
