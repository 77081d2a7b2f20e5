"""Time the numba kernels against their numpy/scipy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are called directly, so the LESIONFORGE_DISABLE_JIT flag does
not matter here.  Each case also checks that the two paths agree.
"""
import argparse
import time

import numpy as np

from lesionforge import _kernels as k
from lesionforge.patches import grid_centers


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def accumulate_case(n=240, p=21):
    """One full-slice CND accumulation: every valid center of an n x n slice."""
    rng = np.random.default_rng(0)
    gy, gx = np.meshgrid(grid_centers(n, p, 1), grid_centers(n, p, 1), indexing="ij")
    ys, xs = gy.ravel().astype(np.int64), gx.ravel().astype(np.int64)
    values = rng.random((len(ys), p, p))
    run = lambda f: f(np.zeros((n, n)), values, ys, xs)
    return f"accumulate {n}x{n} p={p}", run, k._numba_accumulate_windows, \
        k._numpy_accumulate_windows, np.allclose


def label_case(shape=(48, 128, 128), density=0.3):
    rng = np.random.default_rng(1)
    mask = rng.random(shape) < density
    run = lambda f: f(mask, True)
    same = lambda a, b: a[1] == b[1] and np.array_equal(a[0], b[0])
    return f"label26 {shape} density={density}", run, k._numba_label_components, \
        k._numpy_label_components, same


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'case':44s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    for name, run, fast, slow, same in (accumulate_case(), label_case(),
                                        label_case(density=0.05)):
        agree = same(run(fast), run(slow))  # also warms up the JIT
        tf = best_of(lambda: run(fast), args.repeat)
        ts = best_of(lambda: run(slow), args.repeat)
        print(f"{name:44s} {tf * 1e3:10.2f} {ts * 1e3:10.2f} {ts / tf:8.1f}x  {agree}")


if __name__ == "__main__":
    main()
