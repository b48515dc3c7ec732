"""Time the numba kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on inputs shaped like its heaviest call site: state
membership on Monte Carlo batches against the Nine Rooms wall boxes, interval
propagation through a 64-unit layer on verifier cell batches, outcome
reduction over 10^4 episodes of horizon 400, and triangular masses on noise
partitions. Timings are best-of-N wall clock after one warm-up call.
``interval_affine`` is timed on a first layer (width 2) and a hidden layer
(width 64); the dispatcher uses the loop kernel only up to
``AFFINE_LOOP_MAX_WIDTH`` inputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from claps import _kernels as K


def cases(rng):
    from claps.ninerooms import load_nine_rooms
    walls = load_nine_rooms().task.unsafe.arrays()
    pts = rng.uniform(0, 3, (100_000, 2))
    lo = rng.uniform(0, 3, (20_000, 64))
    hi = lo + rng.uniform(0, 0.01, lo.shape)
    W, b = rng.normal(0, 1, (64, 64)), rng.normal(0, 1, 64)
    lo2, hi2 = lo[:, :2].copy(), hi[:, :2].copy()
    W2 = rng.normal(0, 1, (64, 2))
    cells_lo = rng.uniform(0, 3, (20_000, 2))
    cells_hi = cells_lo + 0.01
    tgt = rng.random((400, 10_000)) < 0.005
    bad = rng.random((400, 10_000)) < 0.002
    x = rng.uniform(-0.6, 0.6, (200_000,))
    return {
        "points_in_boxes": (pts, *walls),
        "boxes_overlap": (cells_lo, cells_hi, *walls, False),
        "interval_affine 2->64": (lo2, hi2, W2, b),
        "interval_affine 64->64": (lo, hi, W, b),
        "reach_avoid_outcome": (tgt, bad),
        "triangular_cdf": (x, 0.5),
    }


def best(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if K.numba_impl is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a in cases(rng).items():
        kernel = name.split()[0]
        t_np = best(getattr(K.numpy_impl, kernel), a, args.repeat)
        t_nb = best(getattr(K.numba_impl, kernel), a, args.repeat)
        print(f"{name:<26}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
