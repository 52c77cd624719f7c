"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py --n 2000 --r 5 --p 0.3 --repeat 5

Prints one CSV row per kernel: name, both timings in ms, speedup and the
max abs difference between the two outputs.
"""
import argparse
import csv
import sys
import time

import numpy as np

from lrmc import _backend
from lrmc.matops import IndexSet


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n, r, p, seed):
    rng = np.random.default_rng(seed)
    L = np.ascontiguousarray(rng.standard_normal((n, r)))
    R = np.ascontiguousarray(rng.standard_normal((n, r)))
    omega = IndexSet.from_mask(rng.random((n, n)) < p)
    rows, cols = omega.rows, omega.cols
    vals = rng.standard_normal(rows.shape[0])
    # row pointers of the row-major index set
    ptr = np.zeros(n + 1, dtype=rows.dtype)
    np.cumsum(np.bincount(rows, minlength=n), out=ptr[1:])
    k = max(1, int(0.2 * n * p))
    return {
        "masked_dot": lambda K: K.masked_dot(L, R, rows, cols),
        "full_dot": lambda K: K.full_dot(L, R),
        "masked_matmul": lambda K: K.masked_matmul(rows, cols, vals, R, n),
        "segment_kth_largest": lambda K: K.segment_kth_largest(vals, ptr, k),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--r", type=int, default=5)
    ap.add_argument("--p", type=float, default=0.3)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if "compiled" not in _backend.BACKENDS:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    py, cc = _backend.BACKENDS["python"], _backend.BACKENDS["compiled"]

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["kernel", "python_ms", "compiled_ms", "speedup", "max_abs_diff"])
    for name, fn in cases(args.n, args.r, args.p, args.seed).items():
        t_py, a = best_of(lambda: fn(py), args.repeat)
        t_cc, b = best_of(lambda: fn(cc), args.repeat)
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0
        w.writerow([name, f"{1e3 * t_py:.3f}", f"{1e3 * t_cc:.3f}", f"{t_py / t_cc:.2f}", f"{diff:.3e}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
