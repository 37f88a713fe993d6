"""Time the compiled and pure-Python kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and backend with the best time over the
repeats, plus the speed-up of the compiled backend.  Inputs match a
depth-6, K=3 E-step on a 500-point minibatch and a 100k-step chaos game.
"""
import argparse
import timeit

import numpy as np

from ifsem import kernels
from ifsem.data import sierpinski_model
from ifsem.model import build_code_table


def cases(rng):
    model = sierpinski_model().with_depth(6)
    table = build_code_table(model)
    X = rng.uniform(-1, 1, (500, 2))
    scales, rots, trans = model.component_arrays()
    choices = rng.integers(0, 3, 100_000)
    return {
        f"responsibilities N=500 M={table.M}": lambda b: kernels.responsibilities(
            X, table.means, table.sigmas, table.log_prior, backend=b),
        f"mixture_log_density N=500 M={table.M}": lambda b: kernels.mixture_log_density(
            X, table.means, table.sigmas, table.log_prior, backend=b),
        "chaos_game 100k steps": lambda b: kernels.chaos_game(
            scales, rots, trans, choices, np.zeros(2), 32, backend=b),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = sorted(kernels.available_backends())
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    for name, call in cases(np.random.default_rng(0)).items():
        best = {}
        for b in backends:
            call(b)  # warm up
            best[b] = min(timeit.repeat(lambda: call(b), number=1, repeat=args.repeat))
            print(f"{name:<40} {b:<7} {best[b] * 1e3:9.2f} ms")
        if len(best) == 2:
            print(f"{name:<40} speed-up {best['python'] / best['cython']:.1f}x")


if __name__ == "__main__":
    main()
