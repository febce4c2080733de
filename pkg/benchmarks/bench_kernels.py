"""Time the compiled Jacobi kernel against the numpy fallback.

    python3 benchmarks/bench_kernels.py --sizes 16 32 64 --repeat 3

Each row orthogonalises the same random square matrix with both kernels and
reports the best wall time of ``--repeat`` runs plus the largest singular
value difference between them.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from bitstack import linalg
from bitstack._jacobi_py import jacobi_sweeps as fallback_sweeps

try:
    from bitstack._jacobi import jacobi_sweeps as compiled_sweeps
except ImportError:  # extension not built
    compiled_sweeps = None


def best_time(kernel, a: np.ndarray, repeat: int) -> tuple[float, np.ndarray]:
    best = float("inf")
    sigma = None
    for _ in range(repeat):
        cols = np.array(a.T, order="C", copy=True)
        vcols = np.eye(a.shape[1])
        t0 = time.perf_counter()
        kernel(cols, vcols, linalg.JACOBI_TOL, linalg.MAX_SWEEPS, 0.0)
        best = min(best, time.perf_counter() - t0)
        sigma = np.sort(np.linalg.norm(cols, axis=1))[::-1]
    return best, sigma


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    print(f"{'n':>5}{'compiled (ms)':>16}{'python (ms)':>14}{'speedup':>10}{'max |dsigma|':>15}")
    rng = np.random.default_rng(args.seed)
    for n in args.sizes:
        a = rng.standard_normal((n, n))
        t_py, s_py = best_time(fallback_sweeps, a, args.repeat)
        if compiled_sweeps is None:
            print(f"{n:>5}{'n/a':>16}{t_py * 1e3:>14.2f}{'':>10}{'':>15}")
            continue
        t_c, s_c = best_time(compiled_sweeps, a, args.repeat)
        print(f"{n:>5}{t_c * 1e3:>16.2f}{t_py * 1e3:>14.2f}{t_py / t_c:>9.1f}x{np.abs(s_c - s_py).max():>15.2e}")


if __name__ == "__main__":
    main()
