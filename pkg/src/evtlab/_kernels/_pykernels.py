"""Pure-numpy reference kernels.

Every reduction here runs in a fixed sequential order so that the results are
bit-identical to the compiled kernels in ``_ckernels.pyx`` (which use the same
loop order) and to a naive triple loop.
"""

import numpy as np


_ACCUMULATE_LIMIT = 1 << 22


def bmm(a, b):
    """Batched product of C-contiguous float64 arrays (B, m, k) @ (B, k, n)."""
    nb, m, k = a.shape
    n = b.shape[2]
    if k > 0 and nb * m * k * n <= _ACCUMULATE_LIMIT:
        # add.accumulate is strictly left-to-right, same order as the loop below
        prods = a[:, :, :, None] * b[:, None, :, :]
        return np.add.accumulate(prods, axis=2)[:, :, -1, :].copy()
    out = np.zeros((nb, m, n))
    for t in range(k):
        out += a[:, :, t, None] * b[:, None, t, :]
    return out


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def dwconv2d(x, w, stride, pad):
    """Depthwise cross-correlation. x (B, C, H, W), w (C, kh, kw)."""
    nb, c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    out = np.zeros((nb, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += w[None, :, i, j, None, None] * patch
    return out


def dwconv2d_grad_input(g, w, x_shape, stride, pad):
    nb, c, h, wd = x_shape
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    gp = np.zeros((nb, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                w[None, :, i, j, None, None] * g
            )
    return gp[:, :, pad:pad + h, pad:pad + wd]


def dwconv2d_grad_weight(g, x, w_shape, stride, pad):
    c, kh, kw = w_shape
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x, pad)
    dw = np.zeros(w_shape)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            dw[:, i, j] = (g * patch).sum(axis=(0, 2, 3))
    return dw
