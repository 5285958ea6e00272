"""Time the numba kernels against their numpy fallbacks.

Runs every dispatched kernel on a fixed mid-size workload with both
backends in one process, checks they agree, and prints a timing table.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--seed 0]
"""

import argparse
import time

import numpy as np

from fovx import backend, kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def workloads(rng):
    x = rng.standard_normal((8, 16, 64, 64)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, stride=1, pad=1)
    packed = rng.standard_normal((200_000, 6))
    packed[:, :3] += 2.0  # keep the diagonal dominant-ish
    vol = rng.standard_normal((64, 64, 64))
    vec = rng.standard_normal((64, 64, 64, 3))
    pts = rng.uniform(0, 63, (200_000, 3))

    nx = 64
    fa = np.full((nx, nx, nx), 0.9)
    v1 = np.zeros((nx, nx, nx, 3))
    v1[..., 2] = 1.0
    seeds = rng.uniform(20, 100, (200, 3))

    def run_march():
        return [
            kernels.march(fa, v1, (2.0, 2.0, 2.0), (0.0, 0.0, 0.0), s,
                          np.array([0.0, 0.0, 1.0]), 1.0, 0.2, 0.0, 512)
            for s in seeds
        ]

    return [
        ("im2col 8x16x64x64 k3", lambda: kernels.im2col(x, 3, 3, stride=1, pad=1)),
        ("col2im adjoint", lambda: kernels.col2im(cols, 64, 64, 3, 3, stride=1, pad=1)),
        ("eig_sym3 200k", lambda: kernels.eig_sym3_batch(packed)),
        ("trilinear scalar 200k", lambda: kernels.trilinear(vol, pts)),
        ("trilinear vector 200k", lambda: kernels.trilinear(vec, pts)),
        ("march 200 seeds", run_march),
    ]


def agreement(a, b):
    if isinstance(a, list):
        return max(agreement(x, y) for x, y in zip(a, b))
    if isinstance(a, tuple):
        return max(agreement(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not backend.HAS_NUMBA:
        print("numba is not importable; only the numpy fallback exists on this host")
        return

    rng = np.random.default_rng(args.seed)
    jobs = workloads(rng)

    backend.set_backend("numba")
    for _, fn in jobs:  # compile before timing
        fn()

    rows = []
    for name, fn in jobs:
        backend.set_backend("numpy")
        t_np, out_np = best_of(fn, args.repeats)
        backend.set_backend("numba")
        t_nb, out_nb = best_of(fn, args.repeats)
        rows.append((name, t_np, t_nb, agreement(out_np, out_nb)))

    w = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{w}}  {'numpy':>9}  {'numba':>9}  {'speedup':>7}  {'max|diff|':>9}")
    for name, t_np, t_nb, diff in rows:
        print(f"{name:<{w}}  {t_np * 1e3:8.2f}ms  {t_nb * 1e3:8.2f}ms  {t_np / t_nb:6.1f}x  {diff:9.2e}")


if __name__ == "__main__":
    main()
