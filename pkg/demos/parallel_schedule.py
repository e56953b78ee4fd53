"""Run the simulated multi-worker factorization and print its schedule and traffic."""
import numpy as np

from rskel import KernelSpec, factorize, make_grid
from rskel.parallel import check_schedule_safety, classify_boxes, compatible_order, parallel_factorize, partition_domain

n_side, leaf, p = 64, 16, 16
points = make_grid(n_side)
spec = KernelSpec.laplace(1.0 / n_side)

f = parallel_factorize(points, spec, 1e-6, leaf, p=p)
grid = partition_domain(f.tree, p)
cls = classify_boxes(grid, f.tree)
print(f"{p} workers on a {grid.q}x{grid.q} grid, leaf level {f.tree.levels}")
print("worker color interior boundary messages words")
for w in grid.workers:
    c = f.stats["comm"][w]
    print(f"{w:6d} {grid.color(w):5d} {len(cls[w][0]):8d} {len(cls[w][1]):8d} {c['messages']:8d} {c['words']:9d}")

for lv, d in sorted(f.stats["comm_by_level"].items(), reverse=True):
    ph = sum(c["words"] for c in d["phases"].values())
    tr = sum(c["words"] for c in d["transition"].values())
    print(f"level {lv}: {ph} words during box phases, {tr} during the level transition")

print("schedule conflicts:", len(check_schedule_safety(f.stats["phase_log"])))
seq = factorize(points, spec, 1e-6, leaf, order=compatible_order(p))
b = np.random.default_rng(0).random(len(points))
print("identical to the sequential run in the same order:", np.array_equal(f.solve(b), seq.solve(b)))
