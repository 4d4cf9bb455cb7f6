"""Benchmark the twin numba/numpy paths of the hot kernels.

Times forward+backward round trips of windowed attention, bilinear map
sampling, and segment-mean pooling on synthetic inputs, once per path,
and prints reps/sec plus the numba speedup.  The numba timings exclude
compilation (one warmup call per kernel before the clock starts).
"""

from __future__ import annotations

import argparse
import os
import time

import numpy as np

from quadfuse import kernels


def time_reps(fn, reps: int) -> float:
    fn()
    start = time.perf_counter()
    for _ in range(reps):
        fn()
    return max(1e-9, time.perf_counter() - start)


def attention_case(rng, d, size, k):
    Q, K, V, rawQ = rng.normal(size=(4, d, size, size))
    mask = rng.random((size, size)) < 0.85
    dOut = rng.normal(size=(d, size, size))

    def run():
        out, probs, fallback = kernels.attn_forward(Q, K, V, rawQ, mask, k)
        kernels.attn_backward(dOut, Q, K, V, probs, fallback, k)

    return run


def sampling_case(rng, d, size, n_points):
    fmap = rng.normal(size=(d, size, size))
    mask = rng.random((size, size)) < 0.85
    rows = rng.uniform(0, size - 1, n_points)
    cols = rng.uniform(0, size - 1, n_points)
    dOut = rng.normal(size=(n_points, d))

    def run():
        out, ok, wn, idx = kernels.sample_forward(fmap, mask, rows, cols)
        kernels.sample_backward(dOut, wn, idx, fmap.shape)

    return run


def segmean_case(rng, d, n_points, n_segments):
    values = rng.normal(size=(n_points, d))
    seg = rng.integers(-1, n_segments, n_points)
    dOut = rng.normal(size=(n_segments, d))

    def run():
        out, cnt = kernels.segmean_forward(values, seg, n_segments)
        kernels.segmean_backward(dOut, seg, cnt, n_points)

    return run


def main() -> None:
    parser = argparse.ArgumentParser(
        description="compare numba and numpy kernel paths")
    parser.add_argument("--size", type=int, default=64,
                        help="feature map side length")
    parser.add_argument("--d", type=int, default=16,
                        help="feature width")
    parser.add_argument("--window", type=int, default=5,
                        help="attention window (odd)")
    parser.add_argument("--points", type=int, default=20_000,
                        help="sample/pool point count")
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    cases = [
        ("attention", attention_case(rng, args.d, args.size, args.window)),
        ("sampling", sampling_case(rng, args.d, args.size, args.points)),
        ("segmean", segmean_case(rng, args.d, args.points, args.size ** 2)),
    ]
    paths = ["numpy"]
    if kernels.HAVE_NUMBA:
        paths.append("numba")
    else:
        print("numba unavailable; timing the numpy path only")

    print("bench_kernels")
    print(f"size={args.size} d={args.d} window={args.window} "
          f"points={args.points} reps={args.reps}")
    for name, run in cases:
        per_path = {}
        for path in paths:
            os.environ["QUADFUSE_NUMBA"] = "1" if path == "numba" else "0"
            elapsed = time_reps(run, args.reps)
            per_path[path] = args.reps / elapsed
            print(f"{name}_{path}_reps_per_sec={per_path[path]:.2f}")
        if "numba" in per_path:
            print(f"{name}_speedup={per_path['numba'] / per_path['numpy']:.2f}x")
    os.environ.pop("QUADFUSE_NUMBA", None)


if __name__ == "__main__":
    main()
