#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy fallback.

Runs each kernel on representative problem sizes and prints a table of
per-call times plus the speedup. Use --repeats to trade accuracy for time.
"""

import argparse
import time

import numpy as np

from bevmotion.kernels import _numpy_impl

try:
    from bevmotion.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, args, repeats):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def motion_case(rng, t_prime, n):
    return rng.normal(0.0, 1.5, (t_prime, n, 2))


def cluster_case(rng, t_prime, n, cluster_size):
    motion = motion_case(rng, t_prime, n)
    n_clustered = min(n, 4 * cluster_size)
    members = rng.permutation(n)[:n_clustered].astype(np.int64)
    starts = np.arange(0, n_clustered + 1, cluster_size, dtype=np.int64)
    return motion, members, starts


def sinkhorn_case(rng, n, m):
    src = rng.uniform(-20, 20, (n, 2))
    tgt = rng.uniform(-20, 20, (m, 2))
    d2 = ((src[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2)
    return (-np.expm1(-d2 / 3.0),)


def build_cases(rng):
    cases = []
    for n, m in ((100, 110), (300, 320), (600, 640)):
        cases.append((f"sinkhorn {n}x{m} (300 iters)", "sinkhorn_core",
                      sinkhorn_case(rng, n, m) + (0.005, 300, 1e-9)))
    for n in (500, 2000, 5000):
        motion = motion_case(rng, 5, n)
        labels = motion_case(rng, 5, n)
        cases.append((f"sup {n} cells", "sup_core", (motion, labels, 1.0)))
        cases.append((f"forward {n} cells", "forward_core", (motion, 1.0)))
        cases.append((f"backward {n} cells", "backward_core",
                      (motion, labels, 10.0, 1.0)))
    for size in (50, 150, 300):
        cases.append((f"cluster 4x{size} cells", "cluster_core",
                      cluster_case(rng, 5, 4 * size, size)))
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if _ckernels is None:
        print("compiled kernels are not built; run pip install -e . first")
        return 1

    rng = np.random.default_rng(args.seed)
    cases = build_cases(rng)
    width = max(len(name) for name, _, _ in cases)
    print(f"{'case':<{width}}  {'numpy':>10}  {'compiled':>10}  {'speedup':>8}")
    for name, kernel, call_args in cases:
        t_np = timeit(getattr(_numpy_impl, kernel), call_args, args.repeats)
        t_c = timeit(getattr(_ckernels, kernel), call_args, args.repeats)
        print(f"{name:<{width}}  {t_np * 1e3:>8.3f}ms  {t_c * 1e3:>8.3f}ms"
              f"  {t_np / t_c:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
