import numpy as np
import pytest

from conftest import dense_step
from rskel.driver import factorize
from rskel.geometry import Box, box_distance, build_tree, make_grid
from rskel.kernels import KernelSpec, assemble_block
from rskel.skeletonization import BlockStore, SingularBlockError, read_block, skeletonize_box


def _setup(n_side, leaf, kind="laplace", kappa=25.0):
    pts = make_grid(n_side)
    spec = KernelSpec.laplace(1 / n_side) if kind == "laplace" else KernelSpec.helmholtz(1 / n_side, kappa)
    tree = build_tree(pts, leaf)
    return pts, spec, tree, BlockStore(tree, spec, tree.leaf_indices())


@pytest.mark.parametrize("n_side,leaf,eps", [(16, 16, 1e-6), (32, 64, 1e-12)])
def test_single_step_dense_operator(n_side, leaf, eps):
    d = dense_step(n_side, leaf, Box(2, 1, 1), eps)
    A, Z, R, SN, F = d["A"], d["Z"], d["R"], d["SN"], d["F"]
    nA = np.linalg.norm(A, 2)
    assert len(R) > 0
    # what the algorithm drops is the eps-small R-F coupling of the sparsified matrix
    assert d["coupling"] <= 10 * eps * nA
    assert np.allclose(Z[np.ix_(R, R)], np.eye(len(R)), rtol=0, atol=1e-10)
    assert np.abs(Z[np.ix_(R, SN)]).max() <= 1e-10 * nA
    assert np.abs(Z[np.ix_(SN, R)]).max() <= 1e-10 * nA
    assert np.array_equal(Z[np.ix_(R, F)], np.zeros((len(R), len(F))))
    # far-field block untouched, Schur complement lives in the store
    assert np.allclose(Z[np.ix_(F, F)], A[np.ix_(F, F)], rtol=0, atol=1e-12 * nA)
    store, tree, b = d["store"], d["tree"], d["box"]
    boxes = [b] + tree.neighbors(b)
    for P in boxes:
        for Qb in boxes:
            rows, cols = store.active[P], store.active[Qb]
            assert np.allclose(store.get(P, Qb), Z[np.ix_(rows, cols)], rtol=0, atol=1e-10 * nA)


def test_single_step_dense_operator_helmholtz():
    d = dense_step(32, 64, Box(2, 2, 1), 1e-8, kind="helmholtz")
    Z, R, SN = d["Z"], d["R"], d["SN"]
    nA = np.linalg.norm(d["A"], 2)
    assert len(R) > 0 and d["coupling"] <= 10 * 1e-8 * nA
    assert np.allclose(Z[np.ix_(R, R)], np.eye(len(R)), atol=1e-10)
    assert np.abs(Z[np.ix_(SN, R)]).max() <= 1e-10 * nA


def test_tight_eps_small_boxes_are_noops():
    pts, spec, tree, store = _setup(16, 16)
    before = {b: v.copy() for b, v in store.active.items()}
    f = skeletonize_box(Box(2, 1, 1), store, spec, tree, 1e-12)
    assert f.is_noop and len(f.red) == 0
    assert not store.blocks
    assert all(np.array_equal(store.active[b], v) for b, v in before.items())


def test_symmetry_propagates():
    pts, spec, tree, store = _setup(32, 16)
    for b in tree.boxes(3)[:12]:
        skeletonize_box(b, store, spec, tree, 1e-6)
    for (P, Q) in list(store.keys()):
        a, bt = store.get(P, Q), store.get(Q, P).T
        assert np.allclose(a, bt, rtol=0, atol=1e-12 * np.abs(a).max())


def test_factor_shapes_and_active_shrink():
    pts, spec, tree, store = _setup(64, 64)
    b = Box(3, 3, 3)
    B = store.active[b].copy()
    f = skeletonize_box(b, store, spec, tree, 1e-6)
    nS, nR, nN = len(f.skel), len(f.red), len(f.nbr)
    assert nS + nR == len(B) and nN == 8 * 64
    assert f.interp.shape == (nS, nR)
    assert f.lower.shape == f.upper.shape == (nR, nR)
    assert f.elim_s.shape == (nS, nR) and f.elim_n.shape == (nN, nR)
    assert f.solve_s.shape == (nR, nS) and f.solve_n.shape == (nR, nN)
    assert np.array_equal(store.active[b], f.skel)
    assert set(f.skel) | set(f.red) == set(B)


def test_read_block():
    pts, spec, tree, store = _setup(32, 16)
    P, Q = Box(3, 2, 2), Box(3, 3, 2)
    k = read_block(store, spec, P, Q)
    assert np.array_equal(k, assemble_block(spec, store.active[P], store.active[Q], pts))
    assert np.array_equal(read_block(store, spec, P, Q), k)
    skeletonize_box(Box(3, 3, 3), store, spec, tree, 1e-6)
    upd = read_block(store, spec, P, Q)
    assert (P, Q) in store.keys()
    assert not np.array_equal(upd, assemble_block(spec, store.active[P], store.active[Q], pts))
    assert np.array_equal(read_block(store, spec, P, Q), upd)
    with pytest.raises(ValueError):
        read_block(store, spec, P, Box(2, 1, 1))
    with pytest.raises(ValueError):
        read_block(store, KernelSpec.laplace(1 / 32), P, Q)


def test_store_put_shape_check():
    pts, spec, tree, store = _setup(8, 4)
    with pytest.raises(ValueError, match="active sets"):
        store.put(Box(2, 0, 0), Box(2, 1, 0), np.zeros((3, 4)))


def _store_snapshot(store):
    return ({b: v.tolist() for b, v in store.active.items()},
            {k: (v.data.tobytes(), v.rows.tolist(), v.cols.tolist()) for k, v in store.blocks.items()})


def test_commutation_of_distant_boxes():
    b1, b2 = Box(3, 1, 1), Box(3, 5, 2)
    assert box_distance(b1, b2) > 2
    runs = []
    for order in ((b1, b2), (b2, b1)):
        pts, spec, tree, store = _setup(32, 16)
        skeletonize_box(Box(3, 3, 4), store, spec, tree, 1e-6)  # some shared history
        fs = {b: skeletonize_box(b, store, spec, tree, 1e-6) for b in order}
        runs.append((_store_snapshot(store), fs))
    assert runs[0][0] == runs[1][0]
    for b in (b1, b2):
        x, y = runs[0][1][b], runs[1][1][b]
        for name in ("skel", "red", "nbr", "interp", "lower", "upper", "perm", "elim_s", "elim_n", "solve_s", "solve_n"):
            assert np.array_equal(getattr(x, name), getattr(y, name))


def test_locality_of_reads_and_writes():
    pts = make_grid(64)
    spec = KernelSpec.laplace(1 / 64)
    log = []
    f = factorize(pts, spec, 1e-6, leaf_target=16, log=log)
    tree = f.tree
    assert len(log) == sum(4 ** lv for lv in (3, 4))
    for b, ops in log:
        near = {b, *tree.neighbors(b)}
        far2 = set(tree.distance2_neighbors(b))
        for op, P, Q in ops:
            if op == "write":
                assert P in near and Q in near
            else:
                assert P in near | far2 and Q in near | far2
                if P in far2 or Q in far2:
                    assert b in (P, Q)


def test_stored_pairs_stay_local():
    pts, spec, tree, store = _setup(32, 16)
    for b in tree.boxes(3):
        skeletonize_box(b, store, spec, tree, 1e-6)
        for (P, Q) in store.keys():
            assert box_distance(P, Q) <= 2


class _OnesSpec(KernelSpec):
    # rank-one kernel: everything but one index is redundant and X_RR vanishes
    def block(self, rows, cols, points):
        return np.ones((len(rows), len(cols)))

    def proxy_block(self, proxy, cols, points):
        return np.ones((len(proxy), len(cols)))


def test_singular_block_names_box():
    pts = make_grid(32)
    spec = _OnesSpec("laplace", 1 / 32)
    tree = build_tree(pts, 16)
    store = BlockStore(tree, spec, tree.leaf_indices())
    with pytest.raises(SingularBlockError, match=r"Box\(l=3, i=2, j=2\)"):
        skeletonize_box(Box(3, 2, 2), store, spec, tree, 1e-6)
