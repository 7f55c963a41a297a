"""Time the numpy and numba variants of every hot kernel on training-sized
inputs and check that they agree.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from jbot import kernels
from jbot._accel import NUMBA_AVAILABLE


def inputs(rng):
    # one small-preset step: 2B=128 views x 31 tokens x d=32, 4 heads
    x = rng.standard_normal((128 * 31, 32))
    gamma, beta = rng.standard_normal(32), rng.standard_normal(32)
    y, xhat, rstd = kernels.implementation("numpy", "layernorm_fwd")(x, gamma, beta, 1e-5)
    h = rng.standard_normal((128 * 31, 128))
    scores = rng.standard_normal((128 * 4 * 31, 31))
    allow = rng.random((128 * 4 * 31, 31)) < 0.6
    allow[:, 0] = True
    p = kernels.implementation("numpy", "softmax_fwd")(scores, allow, 1.0)
    a, b = rng.standard_normal((600, 32)), rng.standard_normal((1600, 32))
    pt = rng.random(30)
    return {
        "layernorm_fwd": (x, gamma, beta, 1e-5),
        "layernorm_bwd": (rng.standard_normal(x.shape), xhat, rstd, gamma),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, rng.standard_normal(h.shape)),
        "softmax_fwd": (scores, allow, 1.0),
        "softmax_bwd": (p, rng.standard_normal(p.shape), 1.0),
        "pairwise_dist": (a, b),
        "prefix_select": (pt, 0.3 * pt.sum()),
    }


def timeit(fn, args, repeat):
    fn(*args)  # warm-up (compiles numba)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare")
        return
    data = inputs(np.random.default_rng(0))
    print(f"{'kernel':<15}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name in kernels.KERNELS:
        f_np = kernels.implementation("numpy", name)
        f_nb = kernels.implementation("numba", name)
        t_np = timeit(f_np, data[name], args.repeat)
        t_nb = timeit(f_nb, data[name], args.repeat)
        diff = max_diff(f_np(*data[name]), f_nb(*data[name]))
        print(f"{name:<15}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
