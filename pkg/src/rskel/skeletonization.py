"""One strong-skeletonization step and the block store it mutates.

The current (partially eliminated) matrix is never formed. Between two boxes
of the current level it is either a stored dense block, written by an earlier
Schur-complement update, or plain kernel evaluation over the boxes' active
indices. Stored blocks carry the global indices of their rows and columns;
when a box's active set later shrinks, reads slice the stored block down to
the current active indices.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .compression import build_compression_matrix, interpolative_decomposition
from .geometry import Box, QuadTree
from .kernels import KernelSpec

__all__ = [
    "BlockStore",
    "ElementaryFactor",
    "SingularBlockError",
    "read_block",
    "skeletonize_box",
]

PIVOT_RTOL = 1e-14


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, box, pivot, scale):
        super().__init__(
            f"redundant block of {box} is numerically singular "
            f"(pivot {pivot:.3e} vs norm {scale:.3e}); eps may be too loose"
        )
        self.box = box


@dataclass
class _Block:
    data: np.ndarray
    rows: np.ndarray
    cols: np.ndarray


def _positions(labels, subset):
    """Positions of ``subset`` within ``labels``; ``None`` when they are identical."""
    if len(labels) == len(subset) and (labels is subset or np.array_equal(labels, subset)):
        return None
    sorter = np.argsort(labels, kind="stable")
    return sorter[np.searchsorted(labels, subset, sorter=sorter)]


class BlockStore:
    """Sparse map from ordered box pairs to modified interaction blocks.

    Parameters
    ----------
    tree : QuadTree
    spec : KernelSpec
    active : dict
        Current active global indices for each box of the working level.
    """

    def __init__(self, tree: QuadTree, spec: KernelSpec, active: dict[Box, np.ndarray]):
        self.tree = tree
        self.spec = spec
        self.active = {b: np.asarray(v, dtype=np.intp) for b, v in active.items()}
        self.blocks: dict[tuple[Box, Box], _Block] = {}
        self.log: list | None = None
        self.dirty: set | None = None
        self.peak_entries = 0

    # -- access ---------------------------------------------------------
    def __contains__(self, key):
        return key in self.blocks

    def keys(self):
        return self.blocks.keys()

    def get(self, bi: Box, bj: Box, quiet=False) -> np.ndarray:
        if self.log is not None and not quiet:
            self.log.append(("read", bi, bj))
        rows, cols = self.active[bi], self.active[bj]
        blk = self.blocks.get((bi, bj))
        if blk is None:
            return self.spec.block(rows, cols, self.tree.points)
        pr = _positions(blk.rows, rows)
        pc = _positions(blk.cols, cols)
        data = blk.data
        if pr is not None:
            data = data[pr]
        if pc is not None:
            data = data[:, pc]
        return data

    def put(self, bi: Box, bj: Box, data: np.ndarray):
        if self.log is not None:
            self.log.append(("write", bi, bj))
        if self.dirty is not None:
            self.dirty.add((bi, bj))
        rows, cols = self.active[bi], self.active[bj]
        if data.shape != (len(rows), len(cols)):
            raise ValueError(f"block shape {data.shape} does not match active sets of {bi}, {bj}")
        self.blocks[(bi, bj)] = _Block(data, rows, cols)

    def install(self, bi: Box, bj: Box, data, rows, cols):
        """Overwrite a block with one received from elsewhere (labels included)."""
        self.blocks[(bi, bj)] = _Block(data, np.asarray(rows, np.intp), np.asarray(cols, np.intp))

    def raw(self, bi: Box, bj: Box) -> _Block | None:
        return self.blocks.get((bi, bj))

    def entries(self) -> int:
        """Number of scalars held in stored blocks, after trimming to active sets."""
        total = 0
        for (bi, bj) in self.blocks:
            total += len(self.active[bi]) * len(self.active[bj])
        return total

    def note_peak(self):
        self.peak_entries = max(self.peak_entries, self.entries())

    # -- level transition -------------------------------------------------
    def coarsen(self, parents=None) -> "BlockStore":
        """Regroup the store onto the parent level.

        Every parent owns its children's active indices (SW, SE, NW, NE).
        A parent pair gets a stored block when any of its child pairs is
        stored; the rest of that block is filled from the kernel. With
        ``parents`` given, only blocks whose row box is in that set are built.
        """
        level = next(iter(self.active)).level
        if level == 0:
            raise ValueError("cannot coarsen the root level")
        merged: dict[Box, list[np.ndarray]] = {}
        for c in sorted(self.active):
            merged.setdefault(c.parent, [None] * 4)[_child_slot(c)] = self.active[c]
        new_active = {p: np.concatenate(parts) for p, parts in merged.items() if all(x is not None for x in parts)}
        out = BlockStore(self.tree, self.spec, new_active)
        out.peak_entries = self.peak_entries
        groups: dict[tuple[Box, Box], list[tuple[Box, Box]]] = {}
        for (c1, c2) in self.blocks:
            key = (c1.parent, c2.parent)
            if parents is not None and key[0] not in parents:
                continue
            if key[0] not in new_active or key[1] not in new_active:
                continue
            groups.setdefault(key, []).append((c1, c2))
        for (P, Q) in sorted(groups):
            base = np.array(self.spec.block(new_active[P], new_active[Q], self.tree.points))
            roff = _offsets(P, self.active)
            coff = _offsets(Q, self.active)
            for (c1, c2) in groups[(P, Q)]:
                r0, c0 = roff[c1], coff[c2]
                blk = self.get(c1, c2, quiet=True)
                base[r0:r0 + blk.shape[0], c0:c0 + blk.shape[1]] = blk
            out.blocks[(P, Q)] = _Block(base, new_active[P], new_active[Q])
        return out


def _child_slot(c: Box) -> int:
    return (c.i & 1) + 2 * (c.j & 1)


def _offsets(parent: Box, active) -> dict[Box, int]:
    off, out = 0, {}
    for c in parent.children():
        out[c] = off
        off += len(active[c])
    return out


def read_block(store: BlockStore, spec: KernelSpec, bi: Box, bj: Box) -> np.ndarray:
    """Current block between two same-level boxes: stored if modified, kernel otherwise."""
    if spec is not store.spec:
        raise ValueError("store was built for a different kernel")
    if bi.level != bj.level:
        raise ValueError(f"{bi} and {bj} are on different levels")
    return store.get(bi, bj)


class _Reader:
    # adapter handed to build_compression_matrix
    def __init__(self, store):
        self.store = store

    def __call__(self, bi, bj):
        return self.store.get(bi, bj)

    def active(self, b):
        return self.store.active[b]


@dataclass
class ElementaryFactor:
    """Everything needed to apply one skeletonization step to a vector.

    Index arrays are global point indices. ``lower[perm]`` is the
    row-permuted unit lower factor ``L_R`` and ``upper`` is ``U_R`` with
    ``X_RR = L_R U_R``. ``elim_s``/``elim_n`` hold ``X_{S,R} U_R^{-1}`` and
    ``X_{N,R} U_R^{-1}``; ``solve_s``/``solve_n`` hold ``L_R^{-1} X_{R,S}`` and
    ``L_R^{-1} X_{R,N}``.
    """

    box: Box
    skel: np.ndarray
    red: np.ndarray
    nbr: np.ndarray
    interp: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    perm: np.ndarray
    elim_s: np.ndarray
    elim_n: np.ndarray
    solve_s: np.ndarray
    solve_n: np.ndarray
    nbr_boxes: list = field(default_factory=list)

    @property
    def level(self) -> int:
        return self.box.level

    @property
    def is_noop(self) -> bool:
        return len(self.red) == 0

    @property
    def inv_perm(self) -> np.ndarray:
        return np.argsort(self.perm)

    def n_entries(self) -> int:
        return sum(a.size for a in (self.interp, self.lower, self.upper, self.elim_s,
                                    self.elim_n, self.solve_s, self.solve_n))


def _noop_factor(b, active, dtype):
    idx = np.empty(0, dtype=np.intp)
    z = np.zeros((0, 0), dtype=dtype)
    k = len(active)
    return ElementaryFactor(
        box=b, skel=active.copy(), red=idx, nbr=idx, interp=np.zeros((k, 0), dtype), lower=z, upper=z,
        perm=idx, elim_s=np.zeros((k, 0), dtype), elim_n=z, solve_s=np.zeros((0, k), dtype), solve_n=z,
    )


def skeletonize_box(b: Box, store: BlockStore, spec: KernelSpec, tree: QuadTree, eps: float,
                    n_proxy=None, timer=None) -> ElementaryFactor:
    """Compress box ``b``, eliminate its redundant indices and update its neighbours.

    On return ``store.active[b]`` holds only the skeleton indices and every
    block among ``{b} + N(b)`` carries the Schur-complement update.
    """
    t0 = time.perf_counter()
    B = store.active[b]
    reader = _Reader(store)
    C = build_compression_matrix(b, reader, spec, tree, n_proxy)
    idr = interpolative_decomposition(C, eps)
    if len(idr.redundant) == 0:
        if timer is not None:
            timer(time.perf_counter() - t0)
        return _noop_factor(b, B, spec.dtype)
    s, r, T = idr.skeleton, idr.redundant, idr.interp
    Th = T.conj().T

    nbrs = tree.neighbors(b)
    A_BB = store.get(b, b)
    A_SS, A_SR = A_BB[np.ix_(s, s)], A_BB[np.ix_(s, r)]
    A_RS, A_RR = A_BB[np.ix_(r, s)], A_BB[np.ix_(r, r)]
    row_blocks = [store.get(b, n) for n in nbrs]   # A_{B,n}
    col_blocks = [store.get(n, b) for n in nbrs]   # A_{n,B}
    sizes = [len(store.active[n]) for n in nbrs]
    dt = np.result_type(A_BB, T)
    if nbrs:
        A_SN = np.hstack([blk[s] for blk in row_blocks])
        A_RN = np.hstack([blk[r] for blk in row_blocks])
        A_NS = np.vstack([blk[:, s] for blk in col_blocks])
        A_NR = np.vstack([blk[:, r] for blk in col_blocks])
    else:
        A_SN = np.zeros((len(s), 0), dt)
        A_RN = np.zeros((len(r), 0), dt)
        A_NS = np.zeros((0, len(s)), dt)
        A_NR = np.zeros((0, len(r)), dt)

    # sparsify: the R-F coupling is dropped
    X_RR = A_RR - Th @ A_SR - A_RS @ T + Th @ (A_SS @ T)
    X_RS = A_RS - Th @ A_SS
    X_SR = A_SR - A_SS @ T
    X_RN = A_RN - Th @ A_SN
    X_NR = A_NR - A_NS @ T

    perm, lower, upper = sla.lu(X_RR, p_indices=True, check_finite=False)
    scale = np.linalg.norm(X_RR)
    piv = np.min(np.abs(np.diag(upper)))
    if not piv > PIVOT_RTOL * scale:
        raise SingularBlockError(b, piv, scale)

    X_Rx = np.hstack([X_RS, X_RN])
    inv_perm = np.argsort(perm)
    F = sla.solve_triangular(lower, X_Rx[inv_perm], lower=True, unit_diagonal=True, check_finite=False)
    X_xR = np.vstack([X_SR, X_NR])
    E = sla.solve_triangular(upper, X_xR.T, trans="T", lower=False, check_finite=False).T
    ns = len(s)
    update = E @ F

    skel = B[s]
    store.active[b] = skel
    store.put(b, b, A_SS - update[:ns, :ns])
    offs = np.concatenate([[0], np.cumsum(sizes)]) + ns
    for k, n in enumerate(nbrs):
        lo, hi = offs[k], offs[k + 1]
        store.put(b, n, A_SN[:, lo - ns:hi - ns] - update[:ns, lo:hi])
        store.put(n, b, A_NS[lo - ns:hi - ns] - update[lo:hi, :ns])
    for k1, n1 in enumerate(nbrs):
        for k2, n2 in enumerate(nbrs):
            cur = store.get(n1, n2)
            store.put(n1, n2, cur - update[offs[k1]:offs[k1 + 1], offs[k2]:offs[k2 + 1]])

    nbr_idx = np.concatenate([store.active[n] for n in nbrs]) if nbrs else np.empty(0, np.intp)
    fac = ElementaryFactor(
        box=b, skel=skel, red=B[r], nbr=nbr_idx, interp=T, lower=lower, upper=upper, perm=perm,
        elim_s=E[:ns], elim_n=E[ns:], solve_s=F[:, :ns], solve_n=F[:, ns:], nbr_boxes=list(nbrs),
    )
    if timer is not None:
        timer(time.perf_counter() - t0)
    return fac
