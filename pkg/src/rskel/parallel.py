"""Parallel factorization schedule over in-process workers.

The leaf grid is split into contiguous square blocks, one per worker. At each
level every worker first skeletonizes its interior boxes (no neighbour on
another worker), then boundary boxes are handled in four color phases, the
color of a worker being its (row, col) parity in the worker grid. After
every phase the blocks and active lists a worker wrote are copied to the
workers that will read them. When the box grid gets too small for the worker
grid, each 2x2 block of workers folds its state onto its lower-left worker.

Workers never share mutable state: every block that crosses a worker
boundary travels as a copy through a :class:`Communicator`, which counts
messages and words per sender.
"""
from __future__ import annotations

import json
import math
import time
from collections import Counter, defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .driver import FIRST_COMPRESSED_LEVEL_MIN, Factorization, assemble_top, top_level
from .geometry import Box, QuadTree, box_distance, build_tree
from .kernels import KernelSpec
from .skeletonization import BlockStore, ElementaryFactor, skeletonize_box

__all__ = [
    "Communicator",
    "PartitionError",
    "TransportError",
    "Worker",
    "WorkerGrid",
    "check_schedule_safety",
    "classify_boxes",
    "compatible_order",
    "exchange_boundary_updates",
    "grid_schedule",
    "parallel_factorize",
    "partition_domain",
]

N_COLORS = 4
_BLOCK_KINDS = ("block", "child_block")
_ACTIVE_KINDS = ("active", "child_active")


class PartitionError(ValueError):
    pass


class TransportError(RuntimeError):
    def __init__(self, worker, msg):
        super().__init__(f"worker {worker}: {msg}")
        self.worker = worker


# ---------------------------------------------------------------------------
# worker grid

class WorkerGrid:
    """Square grid of workers laid over the box grid of one level.

    ``ids[row, col]`` is the id of the worker at that grid position; ids are
    the row-major positions in the original leaf-level grid, so they survive
    grid shrinking unchanged.
    """

    def __init__(self, level: int, ids: np.ndarray):
        self.level = level
        self.ids = np.asarray(ids, dtype=int)
        q = self.ids.shape[0]
        dim = 2 ** level
        if self.ids.shape != (q, q) or dim % q:
            raise PartitionError(f"a {q}x{q} worker grid does not tile a {dim}x{dim} box grid")
        self.block = dim // q
        self._pos = {int(w): (r, c) for (r, c), w in np.ndenumerate(self.ids)}

    @property
    def p(self) -> int:
        return self.ids.size

    @property
    def q(self) -> int:
        return self.ids.shape[0]

    @property
    def grid_dims(self) -> tuple[int, int]:
        return (self.q, self.q)

    @property
    def workers(self) -> list[int]:
        return sorted(self._pos)

    def position(self, wid: int) -> tuple[int, int]:
        return self._pos[wid]

    def color(self, wid: int) -> int:
        r, c = self._pos[wid]
        return (r % 2) * 2 + (c % 2)

    @property
    def colors(self) -> dict[int, int]:
        return {w: self.color(w) for w in self.workers}

    def owner(self, b: Box) -> int:
        if b.level != self.level:
            raise ValueError(f"{b} is not on level {self.level}")
        return int(self.ids[b.j // self.block, b.i // self.block])

    @property
    def assignment(self) -> dict[Box, int]:
        dim = 2 ** self.level
        return {Box(self.level, i, j): self.owner(Box(self.level, i, j)) for j in range(dim) for i in range(dim)}

    def rect(self, wid: int) -> tuple[int, int, int, int]:
        """Owned box range ``(i0, i1, j0, j1)``, inclusive."""
        r, c = self._pos[wid]
        k = self.block
        return c * k, c * k + k - 1, r * k, r * k + k - 1

    def owned(self, wid: int) -> list[Box]:
        i0, i1, j0, j1 = self.rect(wid)
        return [Box(self.level, i, j) for j in range(j0, j1 + 1) for i in range(i0, i1 + 1)]

    def at_level(self, level: int) -> "WorkerGrid":
        return WorkerGrid(level, self.ids)

    def shrink(self) -> "WorkerGrid":
        """Keep the even-(row, col) worker of every 2x2 worker block."""
        return WorkerGrid(self.level, self.ids[::2, ::2])

    def survivor(self, wid: int) -> int:
        """Worker that absorbs ``wid`` when the grid shrinks."""
        r, c = self._pos[wid]
        return int(self.ids[r - r % 2, c - c % 2])


def partition_domain(tree: QuadTree, p: int, level: int | None = None) -> WorkerGrid:
    """Split the boxes of ``level`` (the leaf level by default) over ``p`` workers.

    ``p`` must be a power of 4 and every worker must get at least 2x2 boxes
    (unless ``p == 1``).
    """
    level = tree.levels if level is None else level
    q = math.isqrt(p) if isinstance(p, (int, np.integer)) and p >= 1 else 0
    if q < 1 or q * q != p or q & (q - 1):
        raise PartitionError(f"p={p} is not a power of 4")
    dim = tree.grid_dim(level)
    if p > 1 and (dim % q or dim // q < 2):
        raise PartitionError(
            f"p={p} on a {dim}x{dim} box grid leaves fewer than 2x2 boxes per worker; "
            "each worker must own at least 2x2 boxes"
        )
    return WorkerGrid(level, np.arange(p).reshape(q, q))


def grid_schedule(tree: QuadTree, p: int) -> dict[int, WorkerGrid]:
    """Worker grid used at each level from the leaves up to the dense top level.

    Going up a level, the grid shrinks by 4 whenever the box grid would
    otherwise be smaller than ``2 sqrt(p) x 2 sqrt(p)``.
    """
    grid = partition_domain(tree, p)
    out = {tree.levels: grid}
    for level in range(tree.levels - 1, top_level(tree) - 1, -1):
        grid = grid.at_level(level)
        if grid.q > 1 and 2 ** level < 2 * grid.q:
            grid = grid.shrink()
        out[level] = grid
    return out


def classify_boxes(grid: WorkerGrid, tree: QuadTree, level: int | None = None) -> dict[int, tuple[list, list]]:
    """``{worker: (interior, boundary)}``, each list in row-major order.

    A boundary box has at least one neighbour owned by another worker.
    """
    if level is not None and level != grid.level:
        grid = grid.at_level(level)
    out = {}
    for w in grid.workers:
        interior, boundary = [], []
        for b in grid.owned(w):
            if any(grid.owner(n) != w for n in tree.neighbors(b)):
                boundary.append(b)
            else:
                interior.append(b)
        out[w] = (interior, boundary)
    return out


def _phases(grid: WorkerGrid, tree: QuadTree):
    # [(phase name, {worker: boxes})] in schedule order
    cls = classify_boxes(grid, tree)
    phases = [("interior", {w: cls[w][0] for w in grid.workers})]
    for c in range(N_COLORS):
        phases.append((f"color{c}", {w: cls[w][1] for w in grid.workers if grid.color(w) == c}))
    return phases


def compatible_order(p: int):
    """Box order for the sequential driver that matches the ``p``-worker schedule.

    Per level: interior boxes worker by worker, then boundary boxes color by
    color and worker by worker; row-major within each worker.
    """
    cache = {}

    def order(tree: QuadTree, level: int) -> list[Box]:
        key = id(tree)
        if key not in cache or cache[key][0] is not tree:
            cache[key] = (tree, grid_schedule(tree, p))
        grid = cache[key][1][level]
        return [b for _, per_worker in _phases(grid, tree) for w in sorted(per_worker) for b in per_worker[w]]

    return order


# ---------------------------------------------------------------------------
# transport

class Communicator:
    """In-process channel fabric with exact per-sender counters.

    A message is one ``send`` call carrying a batch of items. Words count
    matrix scalars only (complex counts 2); index lists travel as metadata.
    Payload arrays are copied on send, so nothing is shared between workers.
    """

    def __init__(self, workers=()):
        self._queues: dict[int, deque] = {}
        self.messages: Counter = Counter()
        self.words: Counter = Counter()
        for w in workers:
            self.register(w)

    def register(self, wid: int):
        self._queues.setdefault(int(wid), deque())
        self.messages.setdefault(int(wid), 0)
        self.words.setdefault(int(wid), 0)

    def send(self, src: int, dst: int, items: list):
        if dst not in self._queues:
            raise TransportError(src, f"no channel to worker {dst}")
        if src not in self._queues:
            raise TransportError(src, "sender is not registered")
        copied, words = [], 0
        for item in items:
            if item[0] in _BLOCK_KINDS:
                kind, P, Q, data, rows, cols = item
                data = np.array(data, copy=True)
                words += data.size * (2 if np.iscomplexobj(data) else 1)
                copied.append((kind, P, Q, data, np.array(rows, copy=True), np.array(cols, copy=True)))
            elif item[0] in _ACTIVE_KINDS:
                copied.append((item[0], item[1], np.array(item[2], copy=True)))
            else:
                raise TransportError(src, f"unknown payload item {item[0]!r}")
        self._queues[dst].append((src, copied))
        self.messages[src] += 1
        self.words[src] += words

    def receive_all(self, dst: int) -> list:
        if dst not in self._queues:
            raise TransportError(dst, "receiver is not registered")
        q = self._queues[dst]
        out = list(q)
        q.clear()
        return sorted(out, key=lambda m: m[0])

    def counters(self) -> dict[int, dict[str, int]]:
        return {w: {"messages": int(self.messages[w]), "words": int(self.words[w])} for w in sorted(self._queues)}

    @property
    def total_messages(self) -> int:
        return int(sum(self.messages.values()))

    @property
    def total_words(self) -> int:
        return int(sum(self.words.values()))

    def to_json(self, **kw) -> str:
        return json.dumps({str(w): c for w, c in self.counters().items()}, **kw)


# ---------------------------------------------------------------------------
# workers

@dataclass
class Worker:
    wid: int
    store: BlockStore
    factors: dict = field(default_factory=dict)  # (level, phase) -> [ElementaryFactor]
    dirty_active: set = field(default_factory=set)
    t_comp: float = 0.0
    t_other: float = 0.0

    def add_comp(self, dt):
        self.t_comp += dt


def _rect_distance(rect, b: Box) -> int:
    i0, i1, j0, j1 = rect
    return max(i0 - b.i, b.i - i1, j0 - b.j, b.j - j1, 0)


def _needs_active(rect, b: Box) -> bool:
    return _rect_distance(rect, b) <= 2


def _needs_block(rect, P: Box, Q: Box) -> bool:
    # owned row or column box, or both boxes adjacent to one owned box
    if _rect_distance(rect, P) == 0 or _rect_distance(rect, Q) == 0:
        return True
    i0, i1, j0, j1 = rect
    lo_i, hi_i = max(P.i, Q.i, i0 + 1) - 1, min(P.i, Q.i, i1 - 1) + 1
    lo_j, hi_j = max(P.j, Q.j, j0 + 1) - 1, min(P.j, Q.j, j1 - 1) + 1
    return lo_i <= hi_i and lo_j <= hi_j


def _install(worker: Worker, src: int, items: list, staging: BlockStore | None = None) -> int:
    # "child_*" items are child-level data from which parent blocks get rebuilt
    n = 0
    for item in items:
        kind = item[0]
        target = staging if kind.startswith("child") else worker.store
        if target is None:
            raise TransportError(worker.wid, f"unexpected {kind} item from worker {src}")
        if kind in _ACTIVE_KINDS:
            target.active[item[1]] = item[2]
            continue
        _, P, Q, data, rows, cols = item
        if data.shape != (len(rows), len(cols)):
            raise TransportError(worker.wid, f"block {P},{Q} from worker {src} has shape {data.shape}, "
                                             f"labels say {(len(rows), len(cols))}")
        target.install(P, Q, data, rows, cols)
        n += 1
    return n


def _drain(comm: Communicator, workers) -> dict[int, int]:
    applied = {}
    for w in workers:
        applied[w.wid] = 0
        staging = BlockStore(w.store.tree, w.store.spec, {})
        for src, items in comm.receive_all(w.wid):
            applied[w.wid] += _install(w, src, items, staging)
        if staging.blocks:
            # rebuild the parent blocks exactly as their owner did
            for (P, Q), blk in staging.coarsen().blocks.items():
                w.store.install(P, Q, blk.data, blk.rows, blk.cols)
    return applied


def exchange_boundary_updates(comm: Communicator, workers: dict[int, Worker], grid: WorkerGrid,
                              color: int | None = None) -> dict[int, int]:
    """Send every block and active list written since the last exchange to the workers that read it.

    Senders are the workers of ``color`` (all workers when ``None``). A
    worker receives a block when it owns its row or column box or owns a box
    adjacent to both, and an active list when the box lies within distance 2
    of its own boxes. Returns the number of blocks installed per receiver.
    """
    senders = [w for w in grid.workers if color is None or grid.color(w) == color]
    rects = {v: grid.rect(v) for v in grid.workers}
    for wid in senders:
        w = workers[wid]
        t0 = time.perf_counter()
        payloads = defaultdict(list)
        for B in sorted(w.dirty_active):
            for v in grid.workers:
                if v != wid and _needs_active(rects[v], B):
                    payloads[v].append(("active", B, w.store.active[B]))
        for (P, Q) in sorted(w.store.dirty):
            data = None
            for v in grid.workers:
                if v != wid and _needs_block(rects[v], P, Q):
                    if data is None:
                        data = _block_item(w.store, P, Q)
                    payloads[v].append(data)
        for v in sorted(payloads):
            comm.send(wid, v, payloads[v])
        w.store.dirty.clear()
        w.dirty_active.clear()
        w.t_other += time.perf_counter() - t0
    return _drain(comm, [workers[v] for v in grid.workers])


def _block_item(store: BlockStore, P: Box, Q: Box):
    # trimmed to the current active lists when both are known; a freshly
    # coarsened block may reference a column box whose list has not arrived yet
    if P in store.active and Q in store.active:
        return ("block", P, Q, store.get(P, Q, quiet=True), store.active[P], store.active[Q])
    blk = store.raw(P, Q)
    return ("block", P, Q, blk.data, blk.rows, blk.cols)


def _ship_state(comm, src: Worker, dst: int, owned: set):
    # everything ``dst`` needs to take over ``src``'s boxes: all known active
    # lists and every stored block whose row box is in ``owned``
    items = [("active", B, src.store.active[B]) for B in sorted(src.store.active)]
    for (P, Q) in sorted(src.store.keys()):
        if P not in owned:
            continue
        items.append(_block_item(src.store, P, Q))
    comm.send(src.wid, dst, items)


def _refresh_halo(comm: Communicator, workers: dict[int, Worker], prev: dict[int, BlockStore], grid: WorkerGrid):
    # After coarsening, each worker sends its neighbours what they need at the
    # new level: parent active lists, and for every stored parent block they
    # read, the child blocks it was built from. Receivers rebuild the parent
    # block themselves, so kernel entries never travel.
    rects = {v: grid.rect(v) for v in grid.workers}
    for w in grid.workers:
        wk, old = workers[w], prev[w]
        t0 = time.perf_counter()
        owned = set(grid.owned(w))
        groups = defaultdict(list)
        for (c1, c2) in sorted(old.keys()):
            if c1.parent in owned:
                groups[(c1.parent, c2.parent)].append((c1, c2))
        payloads = defaultdict(list)
        sent = defaultdict(set)
        for P in sorted(owned):
            for v in grid.workers:
                if v != w and _needs_active(rects[v], P):
                    payloads[v].append(("active", P, wk.store.active[P]))
        for (P, Q) in sorted(groups):
            if (P, Q) not in wk.store:
                continue
            receivers = [v for v in grid.workers if v != w and _needs_block(rects[v], P, Q)]
            if not receivers:
                continue
            kids = [("child_block", c1, c2, old.get(c1, c2, quiet=True), old.active[c1], old.active[c2])
                    for (c1, c2) in groups[(P, Q)]]
            for v in receivers:
                for c in P.children() + Q.children():
                    if c not in sent[v]:
                        sent[v].add(c)
                        payloads[v].append(("child_active", c, old.active[c]))
                payloads[v].extend(kids)
        for v in sorted(payloads):
            comm.send(w, v, payloads[v])
        wk.store.dirty.clear()
        wk.dirty_active.clear()
        wk.t_other += time.perf_counter() - t0
    _drain(comm, [workers[v] for v in grid.workers])


def check_schedule_safety(phase_log) -> list[tuple]:
    """Pairs of boxes processed in the same phase on different workers at distance <= 2.

    ``phase_log`` is the list recorded by :func:`parallel_factorize`; an
    empty result means the schedule was safe.
    """
    bad = []
    for entry in phase_log:
        per_worker = entry["boxes"]
        ws = sorted(per_worker)
        for a in range(len(ws)):
            for c in range(a + 1, len(ws)):
                for b1 in per_worker[ws[a]]:
                    for b2 in per_worker[ws[c]]:
                        if box_distance(b1, b2) <= 2:
                            bad.append((entry["level"], entry["phase"], b1, b2))
    return bad


def _counter_diff(now, then):
    return {w: {k: c[k] - then.get(w, {}).get(k, 0) for k in c} for w, c in now.items()}


def _level_counts(comm, start, mid):
    now = comm.counters()
    return {"phases": _counter_diff(mid, start), "transition": _counter_diff(now, mid)}


def _run(tasks, threads):
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for fut in [ex.submit(t) for t in tasks]:
                fut.result()
    else:
        for t in tasks:
            t()


def parallel_factorize(points, spec: KernelSpec, eps: float, leaf_target: int = 64, p: int = 4,
                       comm: Communicator | None = None, n_proxy=None, threads: int = 1,
                       hook=None) -> Factorization:
    """Factor with the ``p``-worker schedule.

    The result equals, bit for bit, ``factorize(..., order=compatible_order(p))``.
    Extra entries in ``stats``: ``comm`` (per-worker counters),
    ``phase_log`` (boxes per worker per phase), ``t_comp``/``t_other``
    (largest per-worker computation time and the remainder), and
    ``comm_by_level`` (per level, counter increments during the box phases
    and during the transition to the next level). ``hook(level, workers)``, if given, is called after the last
    color phase of each level, before the level transition.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    points = np.asarray(points, dtype=float)
    tree = build_tree(points, leaf_target)
    schedule = grid_schedule(tree, p)
    comm = Communicator() if comm is None else comm
    _ = spec.cell_integral  # fill the cache before any worker thread runs
    if spec.is_complex:
        spec.sqrt_potential(tree.points)

    t0 = time.perf_counter()
    grid = schedule[tree.levels]
    leaf = tree.leaf_indices()
    workers: dict[int, Worker] = {}
    for w in grid.workers:
        comm.register(w)
        rect = grid.rect(w)
        store = BlockStore(tree, spec, {b: v for b, v in leaf.items() if _needs_active(rect, b)})
        store.dirty = set()
        workers[w] = Worker(w, store)

    phase_log = []
    comm_by_level = {}
    factors: list[ElementaryFactor] = []
    ranks: dict[int, dict[Box, int]] = {}
    top = top_level(tree)

    for level in range(tree.levels, FIRST_COMPRESSED_LEVEL_MIN - 1, -1):
        grid = schedule[level]
        ranks[level] = {}
        level_start = comm.counters()
        for phase, per_worker in _phases(grid, tree):
            phase_log.append({"level": level, "phase": phase, "boxes": {w: list(bs) for w, bs in per_worker.items()}})

            def task(w=None, boxes=None, phase=phase, level=level):
                wk = workers[w]
                out = wk.factors.setdefault((level, phase), [])
                for b in boxes:
                    out.append(skeletonize_box(b, wk.store, spec, tree, eps, n_proxy=n_proxy, timer=wk.add_comp))
                    wk.dirty_active.add(b)
                    wk.store.note_peak()

            _run([lambda w=w, bs=bs: task(w, bs) for w, bs in per_worker.items()], threads)
            color = None if phase == "interior" else int(phase[-1])
            exchange_boundary_updates(comm, workers, grid, color)
            for w in sorted(per_worker):
                for f in workers[w].factors[(level, phase)]:
                    factors.append(f)
                    ranks[level][f.box] = len(f.skel)

        if hook is not None:
            hook(level, workers)
        before = comm.counters()

        # level transition
        new_grid = schedule[level - 1]
        if new_grid.q < grid.q:
            survivors = set(new_grid.workers)
            for w in grid.workers:
                if w not in survivors:
                    _ship_state(comm, workers[w], grid.survivor(w), set(grid.owned(w)))
            _drain(comm, [workers[w] for w in new_grid.workers])
            for w in grid.workers:
                if w not in survivors:
                    del workers[w]
        if level - 1 == top:
            # gather the child level onto worker 0, which builds the top system
            for w in new_grid.workers:
                if w != 0:
                    owned = {c for P in new_grid.owned(w) for c in P.children()}
                    _ship_state(comm, workers[w], 0, owned)
            _drain(comm, [workers[0]])
            workers[0].store = workers[0].store.coarsen()
            comm_by_level[level] = _level_counts(comm, level_start, before)
            break
        prev = {}
        for w in new_grid.workers:
            wk = workers[w]
            t1 = time.perf_counter()
            owned = new_grid.owned(w)
            prev[w] = wk.store
            new = wk.store.coarsen(parents=set(owned))
            new.active = {P: new.active[P] for P in owned}
            new.dirty = set()
            wk.store = new
            wk.t_other += time.perf_counter() - t1
        _refresh_halo(comm, workers, prev, new_grid)
        comm_by_level[level] = _level_counts(comm, level_start, before)

    if tree.levels < FIRST_COMPRESSED_LEVEL_MIN:
        # nothing was compressed; worker 0 builds the top system from the kernel
        store0 = BlockStore(tree, spec, leaf)
    else:
        store0 = workers[0].store
    top_idx, A_top = assemble_top(store0, tree.boxes(top))
    top_lu = sla.lu_factor(A_top, check_finite=False)
    t_fact = time.perf_counter() - t0

    all_workers = list(workers.values())
    t_comp = max((w.t_comp for w in all_workers), default=0.0)
    stats = {
        "t_fact": t_fact,
        "t_comp": t_comp,
        "t_other": t_fact - t_comp,
        "peak_store_entries": sum(w.store.peak_entries for w in all_workers),
        "top_size": len(top_idx),
        "comm": comm.counters(),
        "comm_by_level": comm_by_level,
        "phase_log": phase_log,
        "p": p,
    }
    return Factorization(n=len(points), dtype=np.dtype(spec.dtype), eps=eps, factors=factors, top_idx=top_idx,
                         top_lu=top_lu, tree=tree, ranks=ranks, stats=stats)
