"""Sequential multi-level factorization."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .geometry import Box, QuadTree, build_tree
from .kernels import KernelSpec
from .skeletonization import BlockStore, ElementaryFactor, skeletonize_box

__all__ = ["Factorization", "factorize", "rank_report", "assemble_top", "FIRST_COMPRESSED_LEVEL_MIN"]

# compression runs on levels L..3; the level-2 system is factored densely
FIRST_COMPRESSED_LEVEL_MIN = 3


@dataclass
class Factorization:
    """Elementary factors in application order plus the dense top-level factor."""

    n: int
    dtype: np.dtype
    eps: float
    factors: list[ElementaryFactor]
    top_idx: np.ndarray
    top_lu: tuple
    tree: QuadTree
    ranks: dict[int, dict[Box, int]] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def levels(self) -> list[int]:
        return sorted(self.ranks, reverse=True)

    def n_entries(self) -> int:
        """Scalars stored in the factorization (elementary factors and top LU)."""
        return sum(f.n_entries() for f in self.factors) + self.top_lu[0].size

    def solve(self, b):
        from .solve import apply_inverse
        return apply_inverse(self, b)


def assemble_top(store: BlockStore, boxes: list[Box]) -> tuple[np.ndarray, np.ndarray]:
    """Dense system over the remaining active indices of ``boxes`` (in that order)."""
    idx = np.concatenate([store.active[b] for b in boxes]) if boxes else np.empty(0, np.intp)
    A = np.empty((len(idx), len(idx)), dtype=store.spec.dtype)
    offs = np.concatenate([[0], np.cumsum([len(store.active[b]) for b in boxes])])
    for p, P in enumerate(boxes):
        for q, Q in enumerate(boxes):
            A[offs[p]:offs[p + 1], offs[q]:offs[q + 1]] = store.get(P, Q)
    return idx, A


def top_level(tree: QuadTree) -> int:
    return min(tree.levels, FIRST_COMPRESSED_LEVEL_MIN - 1)


def factorize(points, spec: KernelSpec, eps: float, leaf_target: int = 64, n_proxy=None,
              order=None, log=None, hook=None) -> Factorization:
    """Factor the kernel matrix on ``points`` to tolerance ``eps``.

    Levels ``L`` down to 3 are skeletonized box by box, every box at a level
    in row-major order unless ``order(tree, level)`` supplies another one.
    After each level the skeletons move up to their parents. What remains at
    level 2 is factored densely with partial pivoting.

    ``log``, if a list, receives one ``(box, [(op, bi, bj), ...])`` entry per
    skeletonization step recording every block read and write.
    ``hook(level, store)`` is called once every box of a level is done.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    points = np.asarray(points, dtype=float)
    tree = build_tree(points, leaf_target)
    store = BlockStore(tree, spec, tree.leaf_indices())
    factors: list[ElementaryFactor] = []
    ranks: dict[int, dict[Box, int]] = {}
    t_comp = [0.0]
    t0 = time.perf_counter()

    def add_time(dt):
        t_comp[0] += dt

    for level in range(tree.levels, FIRST_COMPRESSED_LEVEL_MIN - 1, -1):
        boxes = order(tree, level) if order is not None else tree.boxes(level)
        ranks[level] = {}
        for b in boxes:
            if log is not None:
                store.log = []
            f = skeletonize_box(b, store, spec, tree, eps, n_proxy=n_proxy, timer=add_time)
            if log is not None:
                log.append((b, store.log))
                store.log = None
            factors.append(f)
            ranks[level][b] = len(f.skel)
            store.note_peak()
        if hook is not None:
            hook(level, store)
        store = store.coarsen()

    top_boxes = tree.boxes(top_level(tree))
    top_idx, A_top = assemble_top(store, top_boxes)
    top_lu = sla.lu_factor(A_top, check_finite=False)
    stats = {
        "t_fact": time.perf_counter() - t0,
        "t_comp": t_comp[0],
        "peak_store_entries": store.peak_entries,
        "top_size": len(top_idx),
    }
    return Factorization(n=len(points), dtype=np.dtype(spec.dtype), eps=eps, factors=factors, top_idx=top_idx,
                         top_lu=top_lu, tree=tree, ranks=ranks, stats=stats)


def rank_report(f: Factorization) -> dict[int, float]:
    """Mean skeleton size per compressed level."""
    return {lv: float(np.mean(list(r.values()))) for lv, r in sorted(f.ranks.items(), reverse=True) if r}
