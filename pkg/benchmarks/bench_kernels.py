"""Time the compiled orbit kernel against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--R 256] [--L 4096] [--repeat 3]

Both backends receive identical inputs; the script also confirms that
their outputs agree bit for bit.
"""
import argparse
import time

import numpy as np

from asipdyn import _kernels_py
from asipdyn import interval_maps as im

try:
    from asipdyn import _kernels as _compiled
except ImportError:
    _compiled = None

MAPS = {
    "doubling": im.doubling(),
    "tent": im.tent(),
    "piecewise_linear": im.piecewise_linear([1.5, 3.0]),
    "lsv(0.25)": im.lsv(0.25),
}


def _inputs(R, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random(R), rng.integers(0, 2 ** 63, size=R, dtype=np.uint64)


def time_backend(fn, m, R, L, repeat):
    code, params = m.kernel_spec()
    params = np.ascontiguousarray(params, dtype=float)
    best, out = float("inf"), None
    for _ in range(repeat):
        x, states = _inputs(R)
        out = np.empty((R, L))
        t0 = time.perf_counter()
        fn(code, params, x, states, out, True)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--R", type=int, default=256, help="trajectories")
    ap.add_argument("--L", type=int, default=4096, help="steps per trajectory")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    steps = args.R * args.L
    print(f"{'map':<18}{'python [s]':>12}{'cython [s]':>12}{'speedup':>10}{'identical':>11}")
    for name, m in MAPS.items():
        tp, op = time_backend(_kernels_py.orbit_block, m, args.R, args.L, args.repeat)
        if _compiled is None:
            print(f"{name:<18}{tp:>12.3f}{'n/a':>12}{'n/a':>10}{'n/a':>11}")
            continue
        tc, oc = time_backend(_compiled.orbit_block, m, args.R, args.L, args.repeat)
        same = bool(np.array_equal(op, oc))
        print(f"{name:<18}{tp:>12.3f}{tc:>12.3f}{tp / tc:>9.1f}x{str(same):>11}")
    print(f"({steps:,} map evaluations per backend and map, best of {args.repeat})")


if __name__ == "__main__":
    main()
