"""Compare the numba and numpy kernel paths on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes match one global-phase batch: 8 samples, 27 tokens
(10 prompt + 17 image), width 64, 4 heads, MLP width 256.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from fedmgp import _kernels as K


def shapes(rng):
    b, t, d, h = 8, 27, 64, 4
    return {
        "softmax_rows": (rng.normal(size=(b * h * t, t)),),
        "softmax_rows_backward": (K.np_softmax_rows(rng.normal(size=(b * h * t, t))),
                                  rng.normal(size=(b * h * t, t))),
        "layernorm_rows": (rng.normal(size=(b * t, d)), np.ones(d), np.zeros(d), 1e-6),
        "layernorm_rows_backward": (rng.normal(size=(b * t, d)), rng.normal(size=(b * t, d)),
                                    rng.random(b * t) + 0.5, np.ones(d)),
        "gelu": (rng.normal(size=(b, t, 4 * d)),),
        "gelu_backward": (rng.normal(size=(b, t, 4 * d)), np.tanh(rng.normal(size=(b, t, 4 * d))),
                          rng.normal(size=(b, t, 4 * d))),
        "cosine_distance_matrix": (rng.normal(size=(256, d)), rng.normal(size=(10, d))),
    }


def timeit(fn, args, repeat):
    fn(*args)  # compile / warm caches
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if K.NUMBA_KERNELS is None:
        print("numba unavailable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"active backend: {K.backend()}")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, args_ in shapes(rng).items():
        t_np = timeit(K.NUMPY_KERNELS[name], args_, args.repeat)
        t_nb = timeit(K.NUMBA_KERNELS[name], args_, args.repeat)
        print(f"{name:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
