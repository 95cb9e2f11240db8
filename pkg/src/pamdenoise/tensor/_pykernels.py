"""Pure numpy versions of the hot loops.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and the same floating-point accumulation order, so the two
backends produce bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold padded input (N, C, Hp, Wp) into columns (N, C*kh*kw, Ho*Wo)."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, C, kh, kw, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    """Scatter-add columns back onto a padded (N, C, Hp, Wp) canvas."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    return out


def maxpool2_forward(x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3 (row-major, first wins)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(gout, arg):
    n, c, ho, wo = gout.shape
    g = np.zeros((n, c, ho, wo, 4), dtype=np.float64)
    np.put_along_axis(g, arg[..., None].astype(np.intp), gout[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g).reshape(n, c, ho * 2, wo * 2)
