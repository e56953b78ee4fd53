"""Uniform grids and the perfect quadtree built on top of them.

Points sit at cell centres of an ``n_side x n_side`` grid on the unit square,
so every quadtree box at every level covers an exact block of grid cells and
point-to-box assignment is integer arithmetic.

Boxes are addressed by ``Box(level, i, j)`` where ``i`` is the column (x) and
``j`` the row (y) within the ``2**level x 2**level`` level grid. Boxes in a
level are ordered row-major, i.e. by ``(j, i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Box",
    "QuadTree",
    "make_grid",
    "build_tree",
    "neighbors",
    "distance2_neighbors",
    "box_distance",
    "merge_to_parent",
]


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Box:
    """A quadtree box; boxes sort by level, then row-major within the level."""

    level: int
    i: int
    j: int

    def _key(self) -> tuple[int, int, int]:
        return (self.level, self.j, self.i)

    def __lt__(self, other: "Box") -> bool:
        return self._key() < other._key()

    @property
    def grid_coords(self) -> tuple[int, int]:
        return (self.i, self.j)

    @property
    def side_length(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def center(self) -> np.ndarray:
        s = self.side_length
        return np.array([(self.i + 0.5) * s, (self.j + 0.5) * s])

    @property
    def parent(self) -> "Box":
        if self.level == 0:
            raise ValueError("the root box has no parent")
        return Box(self.level - 1, self.i // 2, self.j // 2)

    def children(self) -> list["Box"]:
        """Children in SW, SE, NW, NE order."""
        i, j, lv = 2 * self.i, 2 * self.j, self.level + 1
        return [Box(lv, i, j), Box(lv, i + 1, j),
                Box(lv, i, j + 1), Box(lv, i + 1, j + 1)]

    def __repr__(self) -> str:
        return f"Box(l={self.level}, i={self.i}, j={self.j})"


def make_grid(n_side: int) -> np.ndarray:
    """Cell-centre points of a uniform ``n_side x n_side`` grid.

    Returns an ``(n_side**2, 2)`` array; row ``k = j*n_side + i`` holds the
    point ``((i + 1/2) h, (j + 1/2) h)`` with ``h = 1/n_side``.
    """
    if not isinstance(n_side, (int, np.integer)) or n_side < 2 or not _is_power_of_two(int(n_side)):
        raise ValueError(f"n_side must be a power of 2 and >= 2, got {n_side!r}")
    h = 1.0 / n_side
    c = (np.arange(n_side) + 0.5) * h
    x, y = np.meshgrid(c, c)  # x varies fastest -> row-major global order
    return np.column_stack([x.ravel(), y.ravel()])


class QuadTree:
    """Perfect quadtree over a uniform grid of points.

    Parameters
    ----------
    points : ndarray, shape (N, 2)
        Points produced by :func:`make_grid`.
    levels : int
        Depth of the leaf level (the root is level 0).
    """

    def __init__(self, points: np.ndarray, levels: int):
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        n_side = int(round(np.sqrt(n)))
        if n_side * n_side != n or not _is_power_of_two(n_side):
            raise ValueError("points must form a uniform grid with a power-of-2 side")
        if 2 ** levels > n_side:
            raise ValueError(f"{levels} levels would leave empty leaves on a {n_side}x{n_side} grid")
        self.points = points
        self.n_side = n_side
        self.levels = levels
        self.h = 1.0 / n_side

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def grid_dim(self, level: int) -> int:
        return 2 ** level

    def boxes(self, level: int) -> list[Box]:
        """All boxes of ``level`` in row-major order."""
        d = self.grid_dim(level)
        return [Box(level, i, j) for j in range(d) for i in range(d)]

    @cached_property
    def boxes_by_level(self) -> list[list[Box]]:
        return [self.boxes(lv) for lv in range(self.levels + 1)]

    def contains(self, b: Box) -> bool:
        d = self.grid_dim(b.level)
        return 0 <= b.level <= self.levels and 0 <= b.i < d and 0 <= b.j < d

    def points_in(self, b: Box) -> np.ndarray:
        """Global indices of the grid points physically inside ``b`` (ascending)."""
        m = self.n_side // self.grid_dim(b.level)
        cols = np.arange(b.i * m, (b.i + 1) * m)
        rows = np.arange(b.j * m, (b.j + 1) * m)
        return (rows[:, None] * self.n_side + cols[None, :]).ravel()

    def leaf_indices(self) -> dict[Box, np.ndarray]:
        return {b: self.points_in(b) for b in self.boxes(self.levels)}

    def neighbors(self, b: Box) -> list[Box]:
        return _ring(self, b, 1)

    def distance2_neighbors(self, b: Box) -> list[Box]:
        return _ring(self, b, 2)


def _ring(tree: QuadTree, b: Box, radius: int) -> list[Box]:
    # same-level boxes at Chebyshev distance exactly `radius`, row-major
    d = tree.grid_dim(b.level)
    out = []
    for j in range(max(0, b.j - radius), min(d, b.j + radius + 1)):
        for i in range(max(0, b.i - radius), min(d, b.i + radius + 1)):
            if max(abs(i - b.i), abs(j - b.j)) == radius:
                out.append(Box(b.level, i, j))
    return out


def build_tree(points: np.ndarray, leaf_target: int = 64) -> QuadTree:
    """Build the shallowest perfect quadtree with at most ``leaf_target`` points per leaf."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        raise ValueError("cannot build a tree over an empty point set")
    if leaf_target < 1:
        raise ValueError("leaf_target must be >= 1")
    n = points.shape[0]
    levels = 0
    while n > leaf_target * 4 ** levels:
        levels += 1
    return QuadTree(points, levels)


def neighbors(tree: QuadTree, b: Box) -> list[Box]:
    """Same-level boxes adjacent to ``b`` (Chebyshev grid distance 1)."""
    return tree.neighbors(b)


def distance2_neighbors(tree: QuadTree, b: Box) -> list[Box]:
    """Same-level boxes at Chebyshev grid distance exactly 2 from ``b``."""
    return tree.distance2_neighbors(b)


def box_distance(b1: Box, b2: Box) -> int:
    """Chebyshev distance between box centres in units of the box side."""
    if b1.level != b2.level:
        raise ValueError(f"boxes on different levels: {b1} vs {b2}")
    return max(abs(b1.i - b2.i), abs(b1.j - b2.j))


def merge_to_parent(tree: QuadTree, level: int, skeletons: dict[Box, np.ndarray]) -> dict[Box, np.ndarray]:
    """Let every level-``level-1`` box own the skeleton indices of its children.

    Children are concatenated in SW, SE, NW, NE order.
    """
    if level < 1:
        raise ValueError("level 0 has no parent level")
    merged = {}
    for parent in tree.boxes(level - 1):
        parts = []
        for c in parent.children():
            if c not in skeletons:
                raise KeyError(f"missing skeleton for child {c}")
            parts.append(np.asarray(skeletons[c], dtype=np.intp))
        merged[parent] = np.concatenate(parts) if parts else np.empty(0, dtype=np.intp)
    return merged
