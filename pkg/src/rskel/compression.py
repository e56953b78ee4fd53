"""Interpolative decomposition and the proxy compression matrix of a box."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .geometry import Box, QuadTree
from .kernels import KernelSpec, proxy_points

__all__ = ["IDResult", "interpolative_decomposition", "spectral_norm_estimate", "build_compression_matrix"]


@dataclass
class IDResult:
    """Column ID ``M[:, redundant] ~= M[:, skeleton] @ interp``.

    ``skeleton`` and ``redundant`` are positions into the columns of the
    compressed matrix (not global point indices).
    """

    skeleton: np.ndarray
    redundant: np.ndarray
    interp: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.skeleton)


def spectral_norm_estimate(M, n_iter=10):
    """Power-iteration estimate of ``||M||_2`` (a lower bound).

    The start vector is fixed, so repeated calls give identical results.
    """
    M = np.asarray(M)
    if M.size == 0:
        return 0.0
    v = np.ones(M.shape[1], dtype=M.dtype) / np.sqrt(M.shape[1])
    s = 0.0
    for _ in range(n_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return s
        v = M.conj().T @ w
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return s
        s = np.sqrt(nv)
        v /= nv
    return float(np.linalg.norm(M @ v))


def interpolative_decomposition(M, eps):
    """Column ID of ``M`` by column-pivoted QR.

    The rank is the number of leading diagonal entries of the triangular
    factor with ``|R_kk| > eps |R_11|``, raised if needed until the trailing
    block satisfies ``||R_22|| <= eps ||M||`` (both norms by power
    iteration). Pivoting takes the column of largest remaining norm, ties
    going to the lowest index.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    M = np.asarray(M)
    n = M.shape[1]
    cols = np.arange(n)
    if n == 0:
        return IDResult(cols, cols, np.zeros((0, 0), dtype=M.dtype))
    if M.shape[0] == 0 or not np.any(M):
        return IDResult(cols[:0], cols, np.zeros((0, n), dtype=M.dtype))
    R, piv = sla.qr(M, mode="r", pivoting=True, check_finite=False)
    R = R[: min(M.shape)]
    d = np.abs(np.diag(R))
    k = int(np.count_nonzero(d > eps * d[0]))
    norm_m = spectral_norm_estimate(R)
    while k < len(d) and spectral_norm_estimate(R[k:, k:]) > eps * norm_m:
        k += 1
    R11 = R[:k, :k]
    R12 = R[:k, k:]
    T = sla.solve_triangular(R11, R12, check_finite=False) if k else np.zeros((0, n), dtype=R.dtype)
    return IDResult(piv[:k].copy(), piv[k:].copy(), T)


def build_compression_matrix(b: Box, read, spec: KernelSpec, tree: QuadTree, n_proxy=None):
    """Stack ``[A_{M,B}; A_{B,M}^*; K_{proxy,B}; K_{B,proxy}^*]`` for box ``b``.

    ``read(bi, bj)`` returns the current block between two boxes (stored
    Schur-complement data if present, kernel entries otherwise); columns are
    ordered as ``b``'s active indices, which ``read.active(b)`` returns.
    """
    active = read.active(b)
    parts = []
    for m in tree.distance2_neighbors(b):
        parts.append(read(m, b))
        parts.append(read(b, m).conj().T)
    if n_proxy is None:
        n_proxy = spec.default_n_proxy(b.side_length)
    proxy = proxy_points(b, n_proxy).points
    K = spec.proxy_block(proxy, active, tree.points)
    parts.append(K)
    # K_{B,proxy} = K_{proxy,B}^T for these symmetric kernels, so its adjoint is conj(K)
    parts.append(K.conj())
    return np.vstack(parts) if parts else np.zeros((0, len(active)), dtype=spec.dtype)
