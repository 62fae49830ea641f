"""Compare the numba kernels with the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes match the second LeNet convolution for one batch of 8 images
(8*14*14 receptive fields of 5*5*32 values, 64 filters).
"""
import argparse
import time

import numpy as np

from minconv import kernels
from minconv.tensor import Shape2D, im2col


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    s = Shape2D.same(5)
    x = rng.standard_normal((args.batch, 32, 14, 14)).astype(np.float32)
    w = rng.standard_normal((64, 32 * 25)).astype(np.float32)
    cols = im2col(x, s)
    grad_cols = rng.standard_normal(cols.shape).astype(np.float32)

    kernels.smin_accumulate_numba(cols[:4], w)  # compile outside the timing
    n, c, h, wd = x.shape
    blocks = grad_cols.reshape(n, h, wd, c, 5, 5)
    pad = np.zeros((n, c, h + 4, wd + 4), dtype=np.float32)
    kernels.col2im_accumulate_numba(blocks, pad.copy(), 1)

    a = kernels.smin_accumulate_numba(cols, w)
    b = kernels.smin_accumulate_numpy(cols, w)
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-3)

    rows = [
        ("smin_accumulate", lambda: kernels.smin_accumulate_numba(cols, w), lambda: kernels.smin_accumulate_numpy(cols, w)),
        ("col2im", lambda: kernels.col2im_accumulate_numba(blocks, pad.copy(), 1),
         lambda: kernels.col2im_accumulate_numpy(blocks, pad.copy(), 1)),
    ]
    ops = cols.shape[0] * w.shape[0] * w.shape[1]
    print(f"smin evaluations per call: {ops:,}")
    print(f"{'kernel':<16} {'numba s':>10} {'numpy s':>10} {'speedup':>8}")
    for name, fast, slow in rows:
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<16} {tf:>10.4f} {ts:>10.4f} {ts / tf:>7.1f}x")
    # reference point: the exact im2col matmul the smin kernel replaces
    print(f"{'float matmul':<16} {best_of(lambda: cols @ w.T, args.repeat):>10.4f}")


if __name__ == "__main__":
    main()
