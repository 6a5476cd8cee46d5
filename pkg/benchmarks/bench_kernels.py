"""Benchmark the compiled solver core against the pure-Python fallback.

Builds representative per-frame demixing problems (a patch-sized bump
dictionary plus a handful of profile columns) and times the non-negative
LASSO kernel through both backends on identical inputs.

Usage: python benchmarks/bench_kernels.py [--size 64] [--repeats 20]
"""

import argparse
import time

import numpy as np
from scipy import sparse

from streamdemix._kernels import _fallback
from streamdemix.model import FrameGeometry, build_kernel_grid, kernel_matrix, operator_lipschitz

try:
    from streamdemix._kernels import _core
except ImportError:
    _core = None


def build_problem(size: int, n_profiles: int, seed: int):
    rng = np.random.default_rng(seed)
    geometry = FrameGeometry(width=size, height=size)
    W = kernel_matrix(geometry, build_kernel_grid(geometry, radius=2, stride=2))
    columns = [W]
    if n_profiles:
        data = np.abs(rng.standard_normal((geometry.n_pixels, n_profiles)))
        data[data < 1.2] = 0.0  # sparse blob-like columns
        data[0, :] += 0.1  # keep every column non-empty
        columns.insert(0, sparse.csc_matrix(data))
    chi = sparse.hstack(columns, format="csc") if len(columns) > 1 else W
    y = np.abs(rng.standard_normal(geometry.n_pixels))
    l1 = np.full(chi.shape[1], 0.05)
    l1[:n_profiles] = 0.0
    L = operator_lipschitz(chi)
    return chi, y, l1, L


def time_backend(solver, chi, y, l1, L, repeats: int):
    x0 = np.zeros(chi.shape[1])
    solver(chi, y, l1, L, x0, 2000, 1e-6)  # warm the caches
    start = time.perf_counter()
    for _ in range(repeats):
        x, report = solver(chi, y, l1, L, np.zeros(chi.shape[1]), 2000, 1e-6)
    elapsed = (time.perf_counter() - start) / repeats
    return elapsed, report.final_cost


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=64, help="patch edge length")
    parser.add_argument("--repeats", type=int, default=20, help="solves per measurement")
    args = parser.parse_args()

    print(f"patch {args.size}x{args.size}, {args.repeats} repeats per cell count")
    print(f"{'profiles':>9} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n_profiles in (0, 5, 20):
        chi, y, l1, L = build_problem(args.size, n_profiles, seed=n_profiles + 1)
        py_time, py_cost = time_backend(_fallback.solve_nonneg_lasso, chi, y, l1, L, args.repeats)
        if _core is None:
            print(f"{n_profiles:>9} {py_time * 1e3:>10.2f} {'missing':>10} {'':>8}")
            continue
        cy_time, cy_cost = time_backend(_core.solve_nonneg_lasso, chi, y, l1, L, args.repeats)
        drift = abs(py_cost - cy_cost) / max(1.0, abs(py_cost))
        if drift > 1e-6:
            raise SystemExit(f"backend costs diverge at {n_profiles} profiles: {drift:.2e}")
        print(f"{n_profiles:>9} {py_time * 1e3:>10.2f} {cy_time * 1e3:>10.2f} "
              f"{py_time / cy_time:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
