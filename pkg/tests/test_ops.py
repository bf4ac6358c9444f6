"""Per-operator oracles (loop-level brute force) and gradient checks."""

import numpy as np
import pytest

from segdistill import ops
from segdistill.autodiff import Tensor, grad_check, record, backward, stop_recording
from segdistill.errors import DimensionError, ParameterError
from segdistill.rng import RngState


def T(arr, rg=True):
    return Tensor(np.asarray(arr), requires_grad=rg)


def rand(gen, *shape, dtype=np.float32):
    return gen.standard_normal(shape).astype(dtype)


# ---------------------------------------------------------------------------
# conv2d

def conv2d_loops(x, w, b, stride, padding):
    """Direct 6-loop convolution, independent of im2col."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    if padding == "same":
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + k,
                               j * stride:j * stride + k]
                    out[ni, co, i, j] = (patch * w[co]).sum() + b[co]
    return out


@pytest.mark.parametrize("k,stride,padding", [
    (1, 1, "same"), (3, 1, "same"), (3, 2, "same"),
    (3, 1, "valid"), (5, 1, "same"), (5, 2, "valid"),
])
def test_conv2d_matches_loops(gen, k, stride, padding):
    x = rand(gen, 2, 3, 7, 8)
    w = rand(gen, 4, 3, k, k)
    b = rand(gen, 4)
    out = ops.conv2d(T(x), T(w), T(b), stride=stride, padding=padding)
    want = conv2d_loops(x.astype(np.float64), w.astype(np.float64),
                        b.astype(np.float64), stride, padding)
    np.testing.assert_allclose(out.data, want, rtol=2e-5, atol=2e-5)


def test_conv2d_rejects_even_kernel(gen):
    x, w, b = T(rand(gen, 1, 1, 4, 4)), T(rand(gen, 1, 1, 2, 2)), T(rand(gen, 1))
    with pytest.raises(DimensionError):
        ops.conv2d(x, w, b)


def test_conv2d_rejects_channel_mismatch(gen):
    x, w, b = T(rand(gen, 1, 3, 4, 4)), T(rand(gen, 2, 4, 3, 3)), T(rand(gen, 2))
    with pytest.raises(DimensionError):
        ops.conv2d(x, w, b)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid")])
def test_conv2d_gradients(gen, stride, padding):
    x = T(rand(gen, 2, 2, 6, 6, dtype=np.float64))
    w = T(rand(gen, 3, 2, 3, 3, dtype=np.float64))
    b = T(rand(gen, 3, dtype=np.float64))

    def f(x_, w_, b_):
        return ops.tsum(ops.mul(ops.conv2d(x_, w_, b_, stride=stride,
                                           padding=padding), 0.1))

    assert grad_check(f, [x, w, b]) < 1e-6


# ---------------------------------------------------------------------------
# pooling / unpooling

def pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.zeros((n, c, h // 2, w // 2), dtype=np.uint8)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    win = x[ni, ci, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    flat = win.reshape(-1)           # row-major: 4 candidates
                    best = int(np.argmax(flat))      # np.argmax keeps first max
                    out[ni, ci, i, j] = flat[best]
                    idx[ni, ci, i, j] = best
    return out, idx


def test_maxpool_matches_loops(gen):
    x = rand(gen, 2, 3, 8, 6)
    out, idx = ops.maxpool2_indices(T(x))
    want_out, want_idx = pool_loops(x)
    np.testing.assert_array_equal(out.data, want_out)
    np.testing.assert_array_equal(idx, want_idx)


def test_maxpool_tie_takes_first():
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)     # all equal: index 0 wins
    _, idx = ops.maxpool2_indices(T(x))
    assert idx[0, 0, 0, 0] == 0
    x[0, 0, 0, 1] = x[0, 0, 1, 1] = 5.0              # tie between 1 and 3
    _, idx = ops.maxpool2_indices(T(x))
    assert idx[0, 0, 0, 0] == 1


def test_maxpool_needs_even_dims(gen):
    with pytest.raises(DimensionError):
        ops.maxpool2_indices(T(rand(gen, 1, 1, 5, 4)))


def test_unpool_scatters_to_argmax(gen):
    x = rand(gen, 2, 2, 4, 4)
    pooled, idx = ops.maxpool2_indices(T(x))
    restored = ops.unpool2(pooled, idx, (4, 4))
    # each window: argmax position carries the max, other three are zero
    r = restored.data
    for ni in range(2):
        for ci in range(2):
            for i in range(2):
                for j in range(2):
                    win = r[ni, ci, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    k = int(idx[ni, ci, i, j])
                    assert win.reshape(-1)[k] == pooled.data[ni, ci, i, j]
                    assert (win.reshape(-1) != 0).sum() <= 1


def test_pool_unpool_gradients(gen):
    x = T(rand(gen, 1, 2, 4, 4, dtype=np.float64) * 3)

    def f(x_):
        pooled, idx = ops.maxpool2_indices(x_)
        return ops.tsum(ops.mul(ops.unpool2(pooled, idx, (4, 4)), 0.5))

    assert grad_check(f, [x]) < 1e-6


def test_unpool_roundtrip_nonnegative(gen):
    # on a post-relu tensor (non-negative), pool->unpool keeps the maxima
    # and zeroes the rest, so pooling the result again is the identity
    x = np.abs(rand(gen, 3, 2, 6, 6))
    pooled, idx = ops.maxpool2_indices(T(x))
    restored = ops.unpool2(pooled, idx, (6, 6))
    again, idx2 = ops.maxpool2_indices(restored)
    np.testing.assert_array_equal(again.data, pooled.data)


# ---------------------------------------------------------------------------
# batchnorm

def test_batchnorm_train_uses_biased_batch_stats(gen):
    x = rand(gen, 4, 3, 5, 5)
    gamma = T(np.ones(3, dtype=np.float32))
    beta = T(np.zeros(3, dtype=np.float32))
    rm = np.zeros(3, dtype=np.float32)
    rv = np.ones(3, dtype=np.float32)
    out = ops.batchnorm2d(T(x), gamma, beta, rm, rv, mode="train")
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))                      # biased (ddof=0)
    want = (x - mu.reshape(1, 3, 1, 1)) / np.sqrt(var.reshape(1, 3, 1, 1) + 1e-5)
    np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-5)
    # momentum 0.9 running update
    np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(rv, 0.9 * 1.0 + 0.1 * var, rtol=1e-5)


def test_batchnorm_eval_uses_running_stats(gen):
    x = rand(gen, 2, 2, 3, 3)
    gamma, beta = T(np.full(2, 2.0, np.float32)), T(np.full(2, -1.0, np.float32))
    rm = np.array([0.5, -0.5], dtype=np.float32)
    rv = np.array([4.0, 0.25], dtype=np.float32)
    out = ops.batchnorm2d(T(x), gamma, beta, rm, rv, mode="eval")
    want = 2.0 * (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5) - 1.0
    np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-5)


def test_batchnorm_update_running_flag(gen):
    x = rand(gen, 2, 2, 4, 4)
    rm = np.zeros(2, dtype=np.float32)
    rv = np.ones(2, dtype=np.float32)
    ops.batchnorm2d(T(x), T(np.ones(2, np.float32)), T(np.zeros(2, np.float32)),
                    rm, rv, mode="train", update_running=False)
    np.testing.assert_array_equal(rm, np.zeros(2))   # untouched
    np.testing.assert_array_equal(rv, np.ones(2))


def test_batchnorm_gradients(gen):
    x = T(rand(gen, 3, 2, 4, 4, dtype=np.float64))
    gamma = T(rand(gen, 2, dtype=np.float64))
    beta = T(rand(gen, 2, dtype=np.float64))
    # weight the output elementwise: a plain sum has an identically zero
    # x-gradient (normalized activations sum to zero) so FD sees only noise
    wgt = rand(gen, 3, 2, 4, 4, dtype=np.float64)

    def f(x_, g_, b_):
        rm = np.zeros(2)
        rv = np.ones(2)
        return ops.tsum(ops.mul(
            ops.batchnorm2d(x_, g_, b_, rm, rv, mode="train",
                            update_running=False), wgt))

    assert grad_check(f, [x, gamma, beta]) < 1e-5


# ---------------------------------------------------------------------------
# dropout

def test_dropout_train_scales_survivors(gen):
    x = np.ones((1, 8, 16, 16), dtype=np.float32)
    g = RngState(3).generator()
    out = ops.dropout(T(x), 0.5, g, mode="train")
    vals = np.unique(out.data)
    assert set(vals.tolist()) <= {0.0, 2.0}          # inverted scaling by 1/(1-p)
    frac = (out.data == 0).mean()
    assert 0.3 < frac < 0.7


def test_dropout_eval_is_identity(gen):
    x = rand(gen, 2, 3, 4, 4)
    out = ops.dropout(T(x), 0.9, RngState(0).generator(), mode="eval")
    np.testing.assert_array_equal(out.data, x)


def test_dropout_p_zero_is_identity(gen):
    x = rand(gen, 2, 3, 4, 4)
    out = ops.dropout(T(x), 0.0, RngState(0).generator(), mode="train")
    np.testing.assert_array_equal(out.data, x)


def test_dropout_deterministic_per_generator(gen):
    x = rand(gen, 1, 4, 8, 8)
    a = ops.dropout(T(x), 0.3, RngState(5).generator(), mode="train")
    b = ops.dropout(T(x), 0.3, RngState(5).generator(), mode="train")
    np.testing.assert_array_equal(a.data, b.data)


def test_dropout_gradient_masks_like_forward(gen):
    x = rand(gen, 1, 2, 6, 6)
    xt = T(x)
    with record() as tape:
        out = ops.dropout(xt, 0.4, RngState(9).generator(), mode="train")
        loss = ops.tsum(out)
    backward(tape, loss, params=[xt])
    mask = (out.data != 0)
    want = np.where(mask, 1 / 0.6, 0.0).astype(np.float32)
    np.testing.assert_allclose(xt.grad, want, rtol=1e-6)


# ---------------------------------------------------------------------------
# softmax / log / elementwise

def test_softmax_channels_matches_direct(gen):
    x = rand(gen, 2, 5, 3, 3) * 20                  # exercise stabilization
    out = ops.softmax_channels(T(x))
    e = np.exp(x - x.max(axis=1, keepdims=True))
    want = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=1e-5)


def test_softmax_gradients(gen):
    x = T(rand(gen, 1, 4, 2, 2, dtype=np.float64))
    w = rand(gen, 1, 4, 2, 2, dtype=np.float64)

    def f(x_):
        return ops.tsum(ops.mul(ops.softmax_channels(x_), w))

    assert grad_check(f, [x]) < 1e-6


def test_log_stable_clamps_at_floor():
    x = T(np.array([1.0, 1e-30, 0.0], dtype=np.float64))
    out = ops.log_stable(x)
    np.testing.assert_allclose(out.data,
                               [0.0, np.log(1e-12), np.log(1e-12)])


def test_log_stable_gradient_zero_in_clamped_region():
    x = T(np.array([2.0, 0.0], dtype=np.float64))
    with record() as tape:
        loss = ops.tsum(ops.log_stable(x))
    backward(tape, loss, params=[x])
    np.testing.assert_allclose(x.grad, [0.5, 0.0])


def test_relu_gradient(gen):
    x = T(rand(gen, 10, dtype=np.float64))

    def f(x_):
        return ops.tsum(ops.relu(x_))

    assert grad_check(f, [x]) < 1e-6


def test_elementwise_dispatch(gen):
    a, b = rand(gen, 4), rand(gen, 4)
    np.testing.assert_allclose(ops.elementwise("add", T(a), T(b)).data, a + b)
    np.testing.assert_allclose(ops.elementwise("sub", T(a), T(b)).data, a - b)
    np.testing.assert_allclose(ops.elementwise("mul", T(a), T(b)).data, a * b)
    with pytest.raises(ParameterError):
        ops.elementwise("div", T(a), T(b))


# ---------------------------------------------------------------------------
# bilinear upsampling

def bilinear_loops(x, factor):
    """Reference half-pixel bilinear interpolation with edge clamping."""
    n, c, h, w = x.shape
    ho, wo = h * factor, w * factor
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            si = (i + 0.5) / factor - 0.5
            sj = (j + 0.5) / factor - 0.5
            i0 = int(np.floor(si)); j0 = int(np.floor(sj))
            ti = si - i0; tj = sj - j0
            if si < 0: i0, ti = 0, 0.0
            if sj < 0: j0, tj = 0, 0.0
            i1 = min(i0 + 1, h - 1); j1 = min(j0 + 1, w - 1)
            i0 = min(i0, h - 1); j0 = min(j0, w - 1)
            out[:, :, i, j] = ((1 - ti) * (1 - tj) * x[:, :, i0, j0]
                               + (1 - ti) * tj * x[:, :, i0, j1]
                               + ti * (1 - tj) * x[:, :, i1, j0]
                               + ti * tj * x[:, :, i1, j1])
    return out


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_bilinear_matches_loops(gen, factor):
    x = rand(gen, 2, 3, 4, 5)
    out = ops.bilinear_upsample(T(x), factor)
    want = bilinear_loops(x.astype(np.float64), factor)
    np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-6)


def test_bilinear_rejects_other_factors(gen):
    with pytest.raises(ParameterError):
        ops.bilinear_upsample(T(rand(gen, 1, 1, 4, 4)), 3)


def test_bilinear_gradient_is_transpose(gen):
    x = T(rand(gen, 1, 2, 3, 3, dtype=np.float64))

    def f(x_):
        return ops.tsum(ops.mul(ops.bilinear_upsample(x_, 2), 0.25))

    assert grad_check(f, [x]) < 1e-6


# ---------------------------------------------------------------------------
# concat

def test_concat_channels(gen):
    a, b = rand(gen, 2, 3, 4, 4), rand(gen, 2, 5, 4, 4)
    out = ops.concat_channels([T(a), T(b)])
    np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))


def test_concat_gradient_splits(gen):
    a, b = T(rand(gen, 1, 2, 3, 3)), T(rand(gen, 1, 3, 3, 3))
    with record() as tape:
        out = ops.concat_channels([a, b])
        loss = ops.tsum(ops.mul(out, out))
    backward(tape, loss, params=[a, b])
    np.testing.assert_allclose(a.grad, 2 * a.data, rtol=1e-6)
    np.testing.assert_allclose(b.grad, 2 * b.data, rtol=1e-6)


def test_concat_rejects_spatial_mismatch(gen):
    with pytest.raises(DimensionError):
        ops.concat_channels([T(rand(gen, 1, 1, 4, 4)), T(rand(gen, 1, 1, 5, 4))])
