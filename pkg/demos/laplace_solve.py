"""Factor a Laplace volume system and solve it directly and as a preconditioner.

    python demos/laplace_solve.py [n_side] [eps]
"""
import sys
import time

import numpy as np

from rskel import KernelSpec, factorize, make_grid
from rskel.driver import rank_report
from rskel.solve import dense_matvec, pcg, relres


def main(n_side=64, eps=1e-6):
    points = make_grid(n_side)
    spec = KernelSpec.laplace(1.0 / n_side)
    b = np.random.default_rng(0).random(len(points))

    t0 = time.perf_counter()
    f = factorize(points, spec, eps)
    print(f"N={len(points)}  eps={eps:g}  factor {time.perf_counter() - t0:.2f}s  "
          f"stored {f.n_entries()} scalars, top system {f.stats['top_size']}")
    print("mean skeleton size per level:", {lv: round(r, 1) for lv, r in rank_report(f).items()})

    matvec = lambda v: dense_matvec(spec, points, v)
    x = f.solve(b)
    print(f"direct:  relres {relres(matvec, x, b):.2e}")
    x, n_it = pcg(matvec, f.solve, b, tol=1e-12)
    print(f"PCG:     relres {relres(matvec, x, b):.2e} after {n_it} iterations")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(int(args[0]) if args else 64, float(args[1]) if len(args) > 1 else 1e-6)
