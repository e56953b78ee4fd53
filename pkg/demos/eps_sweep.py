"""Accuracy and cost of the factorization as the tolerance tightens."""
import time

import numpy as np

from rskel import KernelSpec, factorize, make_grid
from rskel.solve import assemble_dense, relres

n_side = 64
points = make_grid(n_side)
spec = KernelSpec.laplace(1.0 / n_side)
A = assemble_dense(spec, points)
b = np.random.default_rng(1).random(len(points))

print(f"{'eps':>8} {'relres':>10} {'t_fact':>8} {'entries':>10} {'ranks':>12}")
for eps in (1e-3, 1e-6, 1e-9, 1e-12):
    t0 = time.perf_counter()
    f = factorize(points, spec, eps, leaf_target=16)
    dt = time.perf_counter() - t0
    ranks = "/".join(f"{np.mean(list(r.values())):.0f}" for _, r in sorted(f.ranks.items(), reverse=True))
    print(f"{eps:8.0e} {relres(lambda v: A @ v, f.solve(b), b):10.2e} {dt:8.2f} {f.n_entries():10d} {ranks:>12}")
