"""Timing of the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_backends.py [--repeats 5]

The assignment kernels take an explicit backend, so both run in this process.
The polytope kernels are chosen at import time, so the end-to-end solve runs
once in a child process per setting of RPMIA_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rpmia.assignment import batch_row_matches, max_kcard_assignment

SOLVE = """
import time, numpy as np
from rpmia.solver import SolverConfig, run_inner_approximation
rng = np.random.default_rng(0)
X = rng.normal(size=(6, 2))
Y = np.vstack([X @ [[0.6, -0.8], [0.8, 0.6]] + 0.5, rng.normal(size=(2, 2))]) + 0.05 * rng.normal(size=(8, 2))
run_inner_approximation(X, Y, "similarity2d", 4, SolverConfig(eps0=0.3))  # warm-up / compile
t = time.perf_counter()
res = run_inner_approximation(X, Y, "similarity2d", 4, SolverConfig(eps0=0.05))
print(time.perf_counter() - t, res.iterations, res.n_facets)
"""


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(1)

    print(f"{'case':<34}{'numba':>10}{'numpy':>10}{'speedup':>9}")
    for n, k in ((10, 7), (30, 27), (60, 54)):
        cost = rng.normal(size=(n, n + 10))
        t = {b: best_of(lambda b=b: max_kcard_assignment(cost, k, b), args.repeats) for b in ("numba", "numpy")}
        print(f"{f'single LAP {n}x{n + 10}, k={k}':<34}{t['numba']:>10.5f}{t['numpy']:>10.5f}{t['numpy'] / t['numba']:>8.1f}x")
    costs = rng.normal(size=(2000, 5, 5))
    t = {b: best_of(lambda b=b: batch_row_matches(costs, 3, b), args.repeats) for b in ("numba", "numpy")}
    print(f"{'batched LAP 2000 x (5x5), k=3':<34}{t['numba']:>10.5f}{t['numpy']:>10.5f}{t['numpy'] / t['numba']:>8.1f}x")

    runs = {}
    for name, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, RPMIA_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", SOLVE], env=env, capture_output=True, text=True, check=True)
        secs, iters, facets = out.stdout.split()
        runs[name] = float(secs)
    print(f"{f'solve 6x8, n_p=4 ({iters} it, {facets} facets)':<34}"
          f"{runs['numba']:>10.3f}{runs['numpy']:>10.3f}{runs['numpy'] / runs['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
