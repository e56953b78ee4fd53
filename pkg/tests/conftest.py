import functools
import re
import sys

import numpy as np

from rskel.driver import factorize
from rskel.geometry import build_tree, make_grid
from rskel.kernels import KernelSpec, assemble_block
from rskel.skeletonization import BlockStore, skeletonize_box
from rskel.solve import assemble_dense


def make_spec(kind, n_side, kappa=25.0):
    h = 1.0 / n_side
    return KernelSpec.laplace(h) if kind == "laplace" else KernelSpec.helmholtz(h, kappa)


@functools.lru_cache(maxsize=None)
def problem(kind, n_side):
    """Points, kernel spec and the dense matrix (cached across tests)."""
    pts = make_grid(n_side)
    spec = make_spec(kind, n_side)
    return pts, spec, assemble_dense(spec, pts)


@functools.lru_cache(maxsize=None)
def factored(kind, n_side, eps, leaf_target=64):
    pts = make_grid(n_side)
    return factorize(pts, make_spec(kind, n_side), eps, leaf_target)


def rhs(n, seed=0):
    return np.random.default_rng(seed).random(n)


def _setup(n_side, leaf, kind="laplace"):
    pts = make_grid(n_side)
    spec = make_spec(kind, n_side)
    tree = build_tree(pts, leaf)
    return pts, spec, tree, BlockStore(tree, spec, tree.leaf_indices())


def dense_step(n_side, leaf, box, eps, kind="laplace"):
    """Rebuild one step densely and return the pieces to compare."""
    pts, spec, tree, store = _setup(n_side, leaf, kind)
    n = len(pts)
    A = assemble_block(spec, np.arange(n), np.arange(n), pts)
    f = skeletonize_box(box, store, spec, tree, eps)
    S, R, N = f.skel, f.red, f.nbr
    SN = np.concatenate([S, N])
    F = np.setdiff1d(np.arange(n), np.concatenate([S, R, N]))

    # sparsification: columns R -= columns S @ T, rows R -= T^* rows S
    Q = np.eye(n, dtype=A.dtype)
    Q[np.ix_(S, R)] = -f.interp
    At = Q.conj().T @ A @ Q
    coupling = 0.0
    if len(R):
        coupling = max(np.linalg.norm(At[np.ix_(R, F)], 2), np.linalg.norm(At[np.ix_(F, R)], 2))
    At[np.ix_(R, F)] = 0
    At[np.ix_(F, R)] = 0

    # block elimination with the recorded factors
    L = np.eye(n, dtype=A.dtype)
    U = np.eye(n, dtype=A.dtype)
    L[np.ix_(R, R)] = f.lower[f.perm]
    L[np.ix_(SN, R)] = np.vstack([f.elim_s, f.elim_n])
    U[np.ix_(R, R)] = f.upper
    U[np.ix_(R, SN)] = np.hstack([f.solve_s, f.solve_n])
    Z = np.linalg.solve(L, At) @ np.linalg.inv(U)
    return dict(A=A, Z=Z, f=f, S=S, R=R, N=N, F=F, SN=SN, coupling=coupling, store=store, tree=tree, box=box)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda line: (int(re.match(r"\d+", line.split()[1]).group()), line)
    for line in sorted(mod.RESULTS, key=key):
        terminalreporter.write_line(line)
