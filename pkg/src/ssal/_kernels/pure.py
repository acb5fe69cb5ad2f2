"""Pure numpy kernels for the convolution / pooling hot paths.

The compiled twin (``_ck``) mirrors these functions exactly, including the
per-pixel accumulation order in the scatter kernels, so both backends produce
bit-identical results and either can back a reproducible run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "pure"


def conv_out_hw(h, w, kh, kw, sh, sw, ph, pw):
    """Output spatial extents of a strided, padded sliding window."""
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return oh, ow


def im2col(x, kh, kw, sh, sw, ph, pw):
    """Gather sliding windows of ``x`` (N,C,H,W) into a patch matrix.

    Returns an array of shape (N*OH*OW, C*kh*kw); row index runs over
    (n, oh, ow) in row-major order, column index over (c, ki, kj).
    """
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw):
    """Scatter-add a patch matrix back onto an (N,C,H,W) image.

    Adjoint of :func:`im2col`. Contributions to one pixel are accumulated
    over (ki, kj) in row-major order; the compiled backend keeps the same
    order so results match bit for bit.
    """
    oh, ow = conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
    patches = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += \
                patches[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    if ph or pw:
        out = out[:, :, ph:ph + h, pw:pw + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, kh, kw, sh, sw):
    """Strided window maximum over (N,C,H,W).

    Returns (values, indices); indices are row-major positions of the first
    maximum inside each kh*kw window.
    """
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    idx = flat.argmax(axis=-1).astype(np.int64)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), np.ascontiguousarray(idx)


def maxpool_backward(grad, idx, h, w, kh, kw, sh, sw):
    """Route pooled gradients back to the winning input positions."""
    n, c, oh, ow = grad.shape
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    rows = (np.arange(oh) * sh)[None, None, :, None] + idx // kw
    colsi = (np.arange(ow) * sw)[None, None, None, :] + idx % kw
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(out, (ni, ci, rows, colsi), grad)
    return out
