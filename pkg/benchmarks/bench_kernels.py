"""Time the numba and pure-numpy variants of every hot kernel on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from rfmtl import _accel
from rfmtl.kernels import implementations, maxpool_forward_np


def cases(rng):
    x = rng.standard_normal((64, 16, 16, 1)).astype(np.float32)
    w = rng.standard_normal((3, 3, 1, 8)).astype(np.float32)
    b = np.zeros(8, np.float32)
    h = rng.standard_normal((64, 14, 14, 8)).astype(np.float32)
    w2 = rng.standard_normal((3, 3, 8, 4)).astype(np.float32)
    g2 = rng.standard_normal((64, 11, 11, 4)).astype(np.float32)
    pooled, arg = maxpool_forward_np(h, 2, 1)
    sig = rng.standard_normal(8192) + 1j * rng.standard_normal(8192)
    pos = np.arange(8192) + np.cumsum(rng.standard_normal(8192) * 1e-4)
    return {
        "conv2d_forward (trunk)": ("conv2d_forward", (x, w, b, 1)),
        "conv2d_forward (branch)": ("conv2d_forward", (pooled, w2, np.zeros(4, np.float32), 1)),
        "conv2d_backward (branch)": ("conv2d_backward", (pooled, w2, g2, 1)),
        "maxpool_forward": ("maxpool_forward", (h, 2, 1)),
        "maxpool_backward": ("maxpool_backward", (pooled, arg, h.shape, 2, 1, h.dtype)),
        "folded_walk": ("folded_walk", (rng.standard_normal(8192) * 1e-3, 0.0, 0.01)),
        "sinc_interp": ("sinc_interp", (sig, pos)),
    }


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (triggers JIT compilation)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        ts.append(time.perf_counter() - t0)
    return min(ts)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy column is meaningful")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for label, (name, a) in cases(rng).items():
        np_fn, nb_fn = implementations(name)
        t_np = best_of(np_fn, a, args.repeat)
        t_nb = best_of(nb_fn, a, args.repeat)
        print(f"{label:<28}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
