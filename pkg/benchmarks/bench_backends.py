"""Compare the compiled and pure-numpy kernel backends.

Times each hot kernel (im2col / col2im / pool2_argmax / pool2_gather /
pool2_scatter) on workload-shaped inputs, plus a composite conv-layer
forward+backward assembled from the same primitives, and reports the
native-over-python speedup.  Results from the two backends are checked
for exact agreement before timing.

Run from the repository root::

    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --repeats 9 --threads 2
"""

import argparse
import sys
import time

import numpy as np

from segdistill.backend import get_backend
from segdistill.errors import ConfigError


# (tag, batch, channels, height, width, kernel) -- shapes drawn from the
# models the package actually trains: 32-map experts, 64-map students,
# and the wide default kernel.
CONV_CASES = [
    ("expert 8x32x64x64 k3", 8, 32, 64, 64, 3),
    ("student 8x64x32x32 k3", 8, 64, 32, 32, 3),
    ("wide 2x64x32x32 k7", 2, 64, 32, 32, 7),
]

POOL_CASES = [
    ("pool 8x32x64x64", 8, 32, 64, 64),
    ("pool 8x64x32x32", 8, 64, 32, 32),
]


def best_of(fn, repeats):
    fn()  # warmup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_inputs(rng, n, c, h, w, k):
    pad = k // 2
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    xp[:, :, pad:pad + h, pad:pad + w] = rng.standard_normal((n, c, h, w))
    cols_shape = (n, c * k * k, h * w)
    cols = rng.standard_normal(cols_shape).astype(np.float32)
    return np.ascontiguousarray(xp), np.ascontiguousarray(cols)


def conv_layer(impl, xp, weight, k, h, w):
    # forward: unfold + matmul; backward: matmul + fold.  Mirrors ops.conv2d.
    cols = impl.im2col(xp, k, 1, h, w)
    out = np.matmul(weight, cols)
    gcols = np.matmul(weight.transpose(1, 0), out)
    return impl.col2im(gcols, xp.shape, k, 1, h, w)


def kernel_rows(native, python, repeats, rng):
    rows = []
    for tag, n, c, h, w, k in CONV_CASES:
        xp, cols = conv_inputs(rng, n, c, h, w, k)
        a = native.im2col(xp, k, 1, h, w)
        b = python.im2col(xp, k, 1, h, w)
        check(tag + " im2col", a, b)
        rows.append(("im2col " + tag,
                     best_of(lambda: python.im2col(xp, k, 1, h, w), repeats),
                     best_of(lambda: native.im2col(xp, k, 1, h, w), repeats)))
        a = native.col2im(cols, xp.shape, k, 1, h, w)
        b = python.col2im(cols, xp.shape, k, 1, h, w)
        check(tag + " col2im", a, b)
        rows.append(("col2im " + tag,
                     best_of(lambda: python.col2im(cols, xp.shape, k, 1, h, w), repeats),
                     best_of(lambda: native.col2im(cols, xp.shape, k, 1, h, w), repeats)))

    for tag, n, c, h, w in POOL_CASES:
        x = np.ascontiguousarray(rng.standard_normal((n, c, h, w)).astype(np.float32))
        ya, ia = native.pool2_argmax(x)
        yb, ib = python.pool2_argmax(x)
        check(tag + " argmax values", ya, yb)
        check(tag + " argmax indices", ia, ib)
        rows.append((tag + " argmax",
                     best_of(lambda: python.pool2_argmax(x), repeats),
                     best_of(lambda: native.pool2_argmax(x), repeats)))
        check(tag + " gather", native.pool2_gather(x, ia), python.pool2_gather(x, ia))
        rows.append((tag + " gather",
                     best_of(lambda: python.pool2_gather(x, ia), repeats),
                     best_of(lambda: native.pool2_gather(x, ia), repeats)))
        check(tag + " scatter",
              native.pool2_scatter(ya, ia, h, w), python.pool2_scatter(ya, ia, h, w))
        rows.append((tag + " scatter",
                     best_of(lambda: python.pool2_scatter(ya, ia, h, w), repeats),
                     best_of(lambda: native.pool2_scatter(ya, ia, h, w), repeats)))

    for tag, n, c, h, w, k in CONV_CASES:
        xp, _ = conv_inputs(rng, n, c, h, w, k)
        weight = rng.standard_normal((c, c * k * k)).astype(np.float32)
        check(tag + " layer", conv_layer(native, xp, weight, k, h, w),
              conv_layer(python, xp, weight, k, h, w))
        rows.append(("conv fwd+bwd " + tag,
                     best_of(lambda: conv_layer(python, xp, weight, k, h, w), repeats),
                     best_of(lambda: conv_layer(native, xp, weight, k, h, w), repeats)))
    return rows


def check(tag, a, b):
    if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b):
        raise AssertionError(f"backend mismatch in {tag}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repetitions per kernel (best is kept)")
    ap.add_argument("--threads", type=int, default=None,
                    help="OpenMP thread cap for the compiled backend")
    args = ap.parse_args(argv)

    python = get_backend("python")
    try:
        native = get_backend("native")
    except (ConfigError, ImportError):
        print("compiled backend not available; build the extension first "
              "(pip install -e . --no-build-isolation)", file=sys.stderr)
        return 1
    if args.threads is not None:
        native.set_num_threads(args.threads)

    rng = np.random.default_rng(0)
    rows = kernel_rows(native, python, args.repeats, rng)

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'python':>10}  {'native':>10}  {'speedup':>7}")
    for tag, tp, tn in rows:
        print(f"{tag:<{width}}  {tp * 1e3:>8.3f}ms  {tn * 1e3:>8.3f}ms  {tp / tn:>6.2f}x")
    print("all outputs agreed exactly across backends")
    return 0


if __name__ == "__main__":
    sys.exit(main())
