"""Differentiable operator set for the segmentation networks.

All ops take/return :class:`~segdistill.autodiff.Tensor` and register their
backward closures on the ambient tape.  Layout is NCHW throughout; spatial
kernels delegate their inner loops to :mod:`segdistill.backend`.
"""

from __future__ import annotations

import numpy as np

from . import backend as B
from .autodiff import Tensor, attach
from .errors import DimensionError, NumericFaultError, ParameterError

LOG_FLOOR = 1e-12


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericFaultError(f"{name}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def _binary(op, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    _check_finite(op, a.data, b.data)
    if op == "add":
        out = a.data + b.data
        bwd = lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]
    elif op == "sub":
        out = a.data - b.data
        bwd = lambda g: [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]
    else:
        out = a.data * b.data
        bwd = lambda g: [_unbroadcast(g * b.data, a.shape),
                         _unbroadcast(g * a.data, b.shape)]
    return attach(out, [a, b], bwd)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape)  # only scalar broadcast is allowed


def scale(a, s: float):
    a = _as_tensor(a)
    s = float(s)
    _check_finite("scale", a.data)
    return attach(a.data * s, [a], lambda g: [g * s])


def relu(a):
    a = _as_tensor(a)
    _check_finite("relu", a.data)
    mask = a.data > 0
    return attach(np.where(mask, a.data, 0), [a], lambda g: [g * mask])


def log_stable(a):
    """log(max(x, 1e-12)); intended domain is [0, 1] (probabilities)."""
    a = _as_tensor(a)
    _check_finite("log_stable", a.data)
    clipped = np.maximum(a.data, LOG_FLOOR)
    live = a.data > LOG_FLOOR
    return attach(np.log(clipped), [a],
                  lambda g: [np.where(live, g / clipped, 0)])


def elementwise(op: str, a, b=None):
    """Dispatch by name; unary ops ignore ``b``."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu,
             "log_stable": log_stable}
    if op not in table:
        raise ParameterError(f"elementwise: unknown op {op!r}")
    fn = table[op]
    if op in ("relu", "log_stable"):
        return fn(a)
    return fn(a, b)


def tsum(a):
    """Sum all elements to a scalar."""
    a = _as_tensor(a)
    shape = a.shape
    return attach(np.asarray(a.data.sum()), [a],
                  lambda g: [np.broadcast_to(g, shape).astype(a.dtype).copy()])


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, w, b, stride: int = 1, padding: str = "same"):
    """Cross-correlation plus per-channel bias.

    ``x``: (N, Cin, H, W); ``w``: (Cout, Cin, k, k) with odd k; ``b``: (Cout,).
    ``same`` keeps H, W at stride 1; ``valid`` applies no padding.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d: x and w must be 4-d")
    n, cin, h, wdt = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be odd square, got {k}x{k2}")
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ParameterError(f"conv2d: padding must be same|valid, got {padding!r}")
    _check_finite("conv2d", x.data, w.data, b.data)

    pad = (k - 1) // 2 if padding == "same" else 0
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output would be empty for input {h}x{wdt}")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = np.ascontiguousarray(x.data)
    cols = B.im2col(xp, k, stride, ho, wo)          # (N, Cin*k*k, ho*wo)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(n, cout, ho, wo) + b.data.reshape(1, cout, 1, 1)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, cout, ho * wo))
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        dw = None
        if w.requires_grad:
            # batched GEMM + reduce; einsum would bypass BLAS here
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(
                np.matmul(w2.T[None], g2))          # (N, Cin*k*k, ho*wo)
            dxp = B.col2im(dcols, xp.shape, k, stride, ho, wo)
            dx = dxp[:, :, pad:pad + h, pad:pad + wdt] if pad else dxp
        return [dx, dw, db]

    return attach(out, [x, w, b], bwd)


# ---------------------------------------------------------------------------
# pooling / unpooling

def maxpool2_indices(x):
    """2x2 stride-2 max pool; returns (pooled Tensor, uint8 index map).

    Index values 0..3 address window positions in row-major order; ties keep
    the first maximum.
    """
    x = _as_tensor(x)
    n, c, h, w = _require_4d("maxpool2_indices", x)
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2_indices: H, W must be even, got {h}x{w}")
    y, idx = B.pool2_argmax(np.ascontiguousarray(x.data))

    def bwd(g):
        return [B.pool2_scatter(np.ascontiguousarray(g), idx, h, w)]

    return attach(y, [x], bwd), idx


def unpool2(y, idx, out_hw):
    """Scatter pooled values to their recorded argmax positions (zeros elsewhere)."""
    y = _as_tensor(y)
    n, c, hh, ww = _require_4d("unpool2", y)
    h, w = out_hw
    if (h, w) != (2 * hh, 2 * ww):
        raise DimensionError(f"unpool2: target {h}x{w} incompatible with input {hh}x{ww}")
    if idx.shape != y.shape:
        raise DimensionError(f"unpool2: index map shape {idx.shape} != {y.shape}")
    if idx.dtype != np.uint8 or (idx > 3).any():
        raise ParameterError("unpool2: index map must be uint8 with values in 0..3")
    out = B.pool2_scatter(np.ascontiguousarray(y.data), idx, h, w)

    def bwd(g):
        return [B.pool2_gather(np.ascontiguousarray(g), idx)]

    return attach(out, [y], bwd)


def _require_4d(name, t):
    if t.data.ndim != 4:
        raise DimensionError(f"{name}: expected 4-d input, got {t.data.ndim}-d")
    return t.shape


# ---------------------------------------------------------------------------
# batch normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm2d(x, gamma, beta, running_mean, running_var, mode: str,
                update_running: bool = True):
    """Per-channel batch normalization.

    Train mode normalizes with biased batch statistics over (N, H, W) and,
    unless ``update_running`` is False (line-search re-evaluations), folds
    them into the running buffers with momentum 0.9.  Eval mode uses the
    running buffers; running arrays are plain ndarrays mutated in place.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n, c, h, w = _require_4d("batchnorm2d", x)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm2d: mode must be train|eval, got {mode!r}")
    _check_finite("batchnorm2d", x.data)
    m = n * h * w

    if mode == "train":
        if m < 2:
            raise DimensionError("batchnorm2d: train mode needs N*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))        # biased
        if update_running:
            running_mean *= BN_MOMENTUM
            running_mean += (1.0 - BN_MOMENTUM) * mu
            running_var *= BN_MOMENTUM
            running_var += (1.0 - BN_MOMENTUM) * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gscaled = g * gamma.data.reshape(1, c, 1, 1)
            if mode == "train":
                s1 = gscaled.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gscaled * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gscaled - s1 - xhat * s2)
            else:
                dx = gscaled * inv_std.reshape(1, c, 1, 1)
        return [dx, dgamma, dbeta]

    return attach(out, [x, gamma, beta], bwd)


# ---------------------------------------------------------------------------
# dropout

def dropout(x, p: float, generator, mode: str):
    """Inverted dropout: kept units are scaled by 1/(1-p) so eval is identity."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout: p must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout: mode must be train|eval, got {mode!r}")
    if mode == "eval" or p == 0.0:
        return attach(x.data.copy(), [x], lambda g: [g])
    keep = (generator.random(x.shape) >= p)
    gain = 1.0 / (1.0 - p)
    scaled = keep * np.asarray(gain, dtype=x.dtype)
    return attach(x.data * scaled, [x], lambda g: [g * scaled])


# ---------------------------------------------------------------------------
# softmax

def softmax_channels(x):
    """Channel softmax per pixel, max-subtracted for stability."""
    x = _as_tensor(x)
    _require_4d("softmax_channels", x)
    _check_finite("softmax_channels", x.data)
    p = softmax_array(x.data)

    def bwd(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return [p * (g - inner)]

    return attach(p, [x], bwd)


def softmax_array(z, axis: int = 1):
    """Plain-array softmax along ``axis`` (shared by fused losses)."""
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(z, axis: int = 1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# bilinear upsampling

_LERP_CACHE: dict[tuple, tuple] = {}


def _lerp_matrix(n_in: int, factor: int, dtype):
    """(n_out, n_in) interpolation matrix, align_corners=False convention."""
    key = (n_in, factor, np.dtype(dtype).str)
    hit = _LERP_CACHE.get(key)
    if hit is not None:
        return hit
    n_out = n_in * factor
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(src).astype(np.intp), 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    t = np.clip(src - np.floor(src), 0.0, 1.0)
    t[src < 0] = 0.0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    mat[np.arange(n_out), i0] += 1.0 - t
    mat[np.arange(n_out), i1] += t
    mat = mat.astype(dtype)
    _LERP_CACHE[key] = mat
    return mat


def bilinear_upsample(x, factor: int):
    """Separable bilinear upsampling by 2, 4, or 8.

    Output pixel centers map to input coordinates via
    ``in = (out + 0.5) / factor - 0.5`` with edge clamping; the gradient is
    the exact transpose of the forward interpolation map.
    """
    x = _as_tensor(x)
    n, c, h, w = _require_4d("bilinear_upsample", x)
    if factor not in (2, 4, 8):
        raise ParameterError(f"bilinear_upsample: factor must be 2, 4 or 8, got {factor}")
    ah = _lerp_matrix(h, factor, x.dtype)
    aw = _lerp_matrix(w, factor, x.dtype)
    out = np.einsum("oi,ncij,pj->ncop", ah, x.data, aw, optimize=True)

    def bwd(g):
        return [np.einsum("oi,ncop,pj->ncij", ah, g, aw, optimize=True)]

    return attach(out, [x], bwd)


# ---------------------------------------------------------------------------
# channel concat (model fusion input)

def concat_channels(parts):
    """Concatenate tensors along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    shapes = {(p.shape[0],) + p.shape[2:] for p in parts}
    if len(shapes) != 1:
        raise DimensionError("concat_channels: batch/spatial dims must agree")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        grads = []
        start = 0
        for wdt in widths:
            grads.append(g[:, start:start + wdt])
            start += wdt
        return grads

    return attach(out, parts, bwd)
