"""Time the block attention kernels under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--sizes 64 128 256] [--repeats 5]
"""
import argparse
import statistics
from timeit import default_timer as timer

import numpy as np

from multiring import kernels
from multiring._accel import HAVE_NUMBA


def case(n, d, groups, seed=0):
    rng = np.random.default_rng(seed)
    q, k, v, do = (rng.standard_normal((groups, n, d)) for _ in range(4))
    pos = np.arange(n, dtype=np.int64)
    return q, k, v, do, pos


def median_time(fn, repeats):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeats):
        t0 = timer()
        fn()
        times.append(timer() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 512])
    ap.add_argument("--head-dim", type=int, default=32)
    ap.add_argument("--groups", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    scale = 1 / np.sqrt(args.head_dim)
    print(f"{'kernel':<9} {'n':>5} " + " ".join(f"{b + '_ms':>10}" for b in backends) + ("   speedup" if HAVE_NUMBA else ""))
    for n in args.sizes:
        q, k, v, do, pos = case(n, args.head_dim, args.groups)
        out, lse = kernels.block_forward(q, k, v, pos, pos, True, scale, backend="numpy")
        delta = (do * out).sum(-1)
        runs = {
            "forward": lambda b: kernels.block_forward(q, k, v, pos, pos, True, scale, backend=b),
            "backward": lambda b: kernels.block_backward(q, k, v, do, lse, delta, pos, pos, True, scale, backend=b),
        }
        for name, fn in runs.items():
            t = {b: median_time(lambda b=b: fn(b), args.repeats) for b in backends}
            row = f"{name:<9} {n:>5} " + " ".join(f"{t[b] * 1e3:>10.3f}" for b in backends)
            if HAVE_NUMBA:
                row += f"   {t['numpy'] / t['numba']:>7.2f}x"
            print(row)


if __name__ == "__main__":
    main()
