"""Timing comparison of the compiled kernel extension against the numpy
fallback on the convolution / pooling hot paths.

Run with: python benchmarks/kernel_benchmark.py
"""

import time

import numpy as np

from ssal._kernels import pure

try:
    from ssal._kernels import _ck as compiled
except ImportError:
    compiled = None

CASES = [
    ("conv 32x3x32x32 k3",   (32, 3, 32, 32), 3, 1, 1),
    ("conv 64x16x16x16 k3",  (64, 16, 16, 16), 3, 1, 1),
    ("conv 16x32x8x8 k5",    (16, 32, 8, 8), 5, 1, 2),
]
POOL_CASES = [
    ("maxpool 32x16x32x32",  (32, 16, 32, 32), 2),
    ("maxpool 64x32x16x16",  (64, 32, 16, 16), 2),
]


def timeit(fn, repeats=10):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def conv_roundtrip(backend, x, k, s, p):
    n, c, h, w = x.shape
    cols = backend.im2col(x, k, k, s, s, p, p)
    backend.col2im(cols, n, c, h, w, k, k, s, s, p, p)


def pool_roundtrip(backend, x, k):
    n, c, h, w = x.shape
    out, idx = backend.maxpool_forward(x, k, k, k, k)
    backend.maxpool_backward(out, idx, h, w, k, k, k, k)


def main():
    if compiled is None:
        print("compiled extension not built; showing pure backend only")
    rng = np.random.default_rng(0)
    print(f"{'case':24s} {'pure':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, shape, k, s, p in CASES:
        x = rng.normal(size=shape).astype(np.float32)
        t_pure = timeit(lambda: conv_roundtrip(pure, x, k, s, p))
        if compiled is None:
            print(f"{name:24s} {t_pure * 1e3:9.2f}ms {'-':>10s}")
            continue
        t_comp = timeit(lambda: conv_roundtrip(compiled, x, k, s, p))
        print(f"{name:24s} {t_pure * 1e3:9.2f}ms {t_comp * 1e3:9.2f}ms "
              f"{t_pure / t_comp:7.2f}x")
    for name, shape, k in POOL_CASES:
        x = rng.normal(size=shape).astype(np.float32)
        t_pure = timeit(lambda: pool_roundtrip(pure, x, k))
        if compiled is None:
            print(f"{name:24s} {t_pure * 1e3:9.2f}ms {'-':>10s}")
            continue
        t_comp = timeit(lambda: pool_roundtrip(compiled, x, k))
        print(f"{name:24s} {t_pure * 1e3:9.2f}ms {t_comp * 1e3:9.2f}ms "
              f"{t_pure / t_comp:7.2f}x")
    if compiled is not None:
        x = rng.normal(size=(8, 4, 16, 16))
        cols_a = pure.im2col(x, 3, 3, 1, 1, 1, 1)
        cols_b = compiled.im2col(x, 3, 3, 1, 1, 1, 1)
        print("backends bit-identical:", np.array_equal(cols_a, cols_b))


if __name__ == "__main__":
    main()
