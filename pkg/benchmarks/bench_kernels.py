"""Time the compiled stencil kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--sizes 9 33 129 513] [--repeat 7]
"""
import argparse
import timeit

import numpy as np

from sandqvi import kernels


def cases(n, rng):
    h = 1.0 / (n + 1)
    y = rng.standard_normal((n, n))
    q = rng.standard_normal((n, n))
    m = 1.0 + rng.random((n, n))
    return {
        "gradient": lambda k: k.gradient(y, h, h, True),
        "gradient_adjoint": lambda k: k.gradient_adjoint(y, q, h, h, True),
        "penalty_p2": lambda k: k.penalty(y, m, h, h, True, False),
        "penalty_box": lambda k: k.penalty(y, m, h, h, True, True),
    }


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[9, 33, 129, 513])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    found = kernels.backends()
    if "cython" not in found:
        print("compiled backend not built; only timing the NumPy fallback")
    rng = np.random.default_rng(args.seed)
    names = sorted(found)
    print(f"{'kernel':<18}{'n':>6}" + "".join(f"{b + ' [us]':>16}" for b in names) + f"{'speedup':>10}")
    for n in args.sizes:
        for label, fn in cases(n, rng).items():
            t = {b: best_time(lambda: fn(found[b]), args.repeat) for b in names}
            speed = t["python"] / t["cython"] if "cython" in t else float("nan")
            print(f"{label:<18}{n:>6}" + "".join(f"{1e6 * t[b]:>16.2f}" for b in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
