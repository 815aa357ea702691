"""Timing comparison of the numpy and numba kernel backends.

Run as a script; numba timings exclude the first (JIT-compiling) call.

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from sparseagg import _kernels as K


def _time(fn, *args, reps=7):
    fn(*args)  # warmup / JIT
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_pair(label, np_fn, nb_fn, *args):
    t_np = _time(np_fn, *args)
    if K.HAS_NUMBA:
        t_nb = _time(nb_fn, *args)
        ratio = t_np / t_nb
        print(f"{label:34s} numpy {t_np:8.2f} ms   numba {t_nb:8.2f} ms   speedup {ratio:4.2f}x")
    else:
        print(f"{label:34s} numpy {t_np:8.2f} ms   (numba unavailable)")


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {K.active_backend()}  (set SPARSEAGG_NUMBA=0/1 to force)")
    cases = [
        ("3x3 s1, 64x32x34x34", (64, 32, 34, 34), 3, 1),
        ("3x3 s1, 16x64x18x18", (16, 64, 18, 18), 3, 1),
        ("5x5 s2, 8x16x37x37", (8, 16, 37, 37), 5, 2),
    ]
    for label, shape, k, s in cases:
        x = rng.standard_normal(shape).astype(np.float32)
        oh = (shape[2] - k) // s + 1
        ow = (shape[3] - k) // s + 1
        bench_pair(f"im2col {label}", K.im2col_numpy, K.im2col_numba, x, k, k, s, oh, ow)
        cols = K.im2col_numpy(x, k, k, s, oh, ow)
        bench_pair(f"col2im {label}", K.col2im_numpy, K.col2im_numba,
                   cols, x.shape, k, k, s, oh, ow)

    x = rng.standard_normal((64, 32, 32, 32)).astype(np.float32)
    bench_pair("maxpool fwd 3x3 s2 p1", K.maxpool_forward_numpy, K.maxpool_forward_numba,
               x, 3, 2, 1)
    out, arg = K.maxpool_forward_numpy(x, 3, 2, 1)
    g = rng.standard_normal(out.shape).astype(np.float32)
    bench_pair("maxpool bwd 3x3 s2 p1", K.maxpool_backward_numpy, K.maxpool_backward_numba,
               g, arg, x.shape, 3, 2, 1)


if __name__ == "__main__":
    main()
