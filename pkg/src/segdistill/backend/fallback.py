"""Pure-numpy implementations of the hot kernels.

Same signatures and bit-identical results as the compiled module in
``_native.pyx``; selected automatically when the extension is unavailable.
All routines expect C-contiguous float32/float64 inputs.
"""

import numpy as np

NAME = "python"


def im2col(xp, k, stride, ho, wo):
    """Unfold padded input (N,C,Hp,Wp) into patch columns (N, C*k*k, ho*wo)."""
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride,
                                    dj:dj + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols, xp_shape, k, stride, ho, wo):
    """Fold patch columns back onto the padded input grid, accumulating overlaps."""
    n, c, _, _ = xp_shape
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + stride * ho:stride,
                dj:dj + stride * wo:stride] += cols6[:, :, di, dj]
    return dxp


def _windowed(x):
    n, c, h, w = x.shape
    return (x.reshape(n, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, h // 2, w // 2, 4))


def pool2_argmax(x):
    """2x2/stride-2 max pool.  Returns (pooled, index map); ties resolve to the
    first maximum in row-major window order."""
    xw = _windowed(x)
    idx = xw.argmax(axis=4).astype(np.uint8)
    y = np.take_along_axis(xw, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return np.ascontiguousarray(y), idx


def pool2_gather(x, idx):
    """Read the value at each recorded window position (pool forward re-applied)."""
    xw = _windowed(x)
    return np.ascontiguousarray(
        np.take_along_axis(xw, idx[..., None].astype(np.intp), axis=4)[..., 0])


def pool2_scatter(y, idx, h, w):
    """Place pooled values at their recorded window positions, zeros elsewhere."""
    n, c, hh, ww = y.shape
    out = np.zeros((n, c, hh, ww, 4), dtype=y.dtype)
    np.put_along_axis(out, idx[..., None].astype(np.intp), y[..., None], axis=4)
    return np.ascontiguousarray(
        out.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
