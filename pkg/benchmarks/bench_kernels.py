"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--batch 512] [--repeat 5]

Both implementations live in ``aet._kernels`` regardless of AET_NO_NUMBA, so
one process can time them side by side. The numba functions are warmed up
first so compilation is excluded.
"""
import argparse
import time

import numpy as np

from aet import _kernels as K


def timeit(fn, *args, repeat=5):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable (or AET_NO_NUMBA set); numpy timings only")
    rng = np.random.default_rng(0)
    B, H, W, C = args.batch, 12, 16, 16
    x = rng.random((B, H, W, C), dtype=np.float32)
    d = rng.random((B, H, W, 9 * C), dtype=np.float32)
    floor = rng.random((48, 64)) > 0.2
    src = np.argwhere(floor)[:3]
    T = 4096
    r, v = rng.normal(size=T), rng.normal(size=T)
    dn = (rng.random(T) < 0.01).astype(np.float64)

    cases = [
        ("im2col3", (x,), K._im2col3_np, getattr(K, "_im2col3_nb", None)),
        ("col2im3", (d, C), K._col2im3_np, getattr(K, "_col2im3_nb", None)),
        ("bfs_distance", (floor, src), K._bfs_distance_np, getattr(K, "_bfs_distance_nb", None)),
        ("gae", (r, v, dn, 0.0, 0.99, 0.95), K._gae_np, getattr(K, "_gae_nb", None)),
    ]
    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a, f_np, f_nb in cases:
        t_np = timeit(f_np, *a, repeat=args.repeat) * 1e3
        if f_nb is None or not K.HAVE_NUMBA:
            print(f"{name:<14}{t_np:>12.3f}{'-':>12}{'-':>10}")
            continue
        t_nb = timeit(f_nb, *a, repeat=args.repeat) * 1e3
        print(f"{name:<14}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
