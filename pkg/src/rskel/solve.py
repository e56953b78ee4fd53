"""Applying the factorization, a dense matvec reference, and Krylov solvers."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .kernels import KernelSpec

__all__ = ["apply_inverse", "dense_matvec", "assemble_dense", "pcg", "gmres", "relres",
           "BreakdownError", "StagnationError"]


class BreakdownError(ArithmeticError):
    pass


class StagnationError(ArithmeticError):
    pass


def apply_inverse(f, b):
    """Approximate ``A^{-1} b`` using a :class:`~rskel.driver.Factorization`.

    The upward pass applies each elementary factor's row operations in
    factorization order, the top system is solved densely, and the downward
    pass undoes the column operations in reverse order. Works in place on a
    copy of ``b`` indexed by global point number.
    """
    b = np.asarray(b)
    if b.shape != (f.n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({f.n},)")
    x = b.astype(np.result_type(b.dtype, f.dtype), copy=True)
    for fac in f.factors:
        if fac.is_noop:
            continue
        R, S, N = fac.red, fac.skel, fac.nbr
        xr = x[R] - fac.interp.conj().T @ x[S]
        xr = sla.solve_triangular(fac.lower, xr[fac.inv_perm], lower=True, unit_diagonal=True,
                                  check_finite=False)
        x[R] = xr
        x[S] -= fac.elim_s @ xr
        if len(N):
            x[N] -= fac.elim_n @ xr
    if len(f.top_idx):
        x[f.top_idx] = sla.lu_solve(f.top_lu, x[f.top_idx], check_finite=False)
    for fac in reversed(f.factors):
        if fac.is_noop:
            continue
        R, S, N = fac.red, fac.skel, fac.nbr
        xr = x[R] - fac.solve_s @ x[S]
        if len(N):
            xr -= fac.solve_n @ x[N]
        xr = sla.solve_triangular(fac.upper, xr, lower=False, check_finite=False)
        x[R] = xr
        x[S] -= fac.interp @ xr
    return x


def dense_matvec(spec: KernelSpec, points, x, block_rows=1024):
    """Exact ``A x`` by direct kernel evaluation, ``block_rows`` rows at a time."""
    points = np.asarray(points, dtype=float)
    x = np.asarray(x)
    n = len(points)
    if x.shape[0] != n:
        raise ValueError("vector length does not match the number of points")
    out = np.empty(x.shape, dtype=np.result_type(x.dtype, spec.dtype))
    cols = np.arange(n)
    for lo in range(0, n, block_rows):
        rows = cols[lo:lo + block_rows]
        out[lo:lo + len(rows)] = spec.block(rows, cols, points) @ x
    return out


def assemble_dense(spec: KernelSpec, points) -> np.ndarray:
    """The full system matrix (only sensible for small ``N``)."""
    idx = np.arange(len(points))
    return spec.block(idx, idx, np.asarray(points, dtype=float))


def relres(matvec, x, b):
    return float(np.linalg.norm(matvec(x) - b) / np.linalg.norm(b))


def _identity(v):
    return v


def pcg(matvec, precond, b, tol=1e-12, maxit=500):
    """Preconditioned conjugate gradients.

    Stops when ``||b - A x|| <= tol ||b||``. Returns ``(x, n_it)``.
    Raises :class:`BreakdownError` on non-positive curvature, which means
    the operator or preconditioner is not positive definite; GMRES is the
    fallback then.
    """
    precond = precond or _identity
    b = np.asarray(b)
    nb = np.linalg.norm(b)
    x = np.zeros_like(b)
    if nb == 0:
        return x, 0
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z)
    for it in range(1, maxit + 1):
        Ap = matvec(p)
        curv = np.vdot(p, Ap)
        if not np.real(curv) > 0:
            raise BreakdownError(f"non-positive curvature {curv} at iteration {it}; try gmres")
        alpha = rz / curv
        x = x + alpha * p
        r = r - alpha * Ap
        if np.linalg.norm(r) <= tol * nb:
            return x, it
        z = precond(r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxit


def gmres(matvec, precond, b, tol=1e-12, restart=20, maxit=1000):
    """Left-preconditioned restarted GMRES.

    Convergence is tested on the preconditioned residual
    ``||M^{-1}(b - A x)|| <= tol ||M^{-1} b||``; ``n_it`` counts inner
    iterations across restarts. Raises :class:`StagnationError` if a whole
    restart cycle fails to reduce the residual.
    """
    precond = precond or _identity
    b = np.asarray(b)
    pb = precond(b)
    x = np.zeros(b.shape, dtype=np.result_type(b.dtype, pb.dtype, np.float64))
    nb = np.linalg.norm(pb)
    if nb == 0:
        return x, 0
    n_it = 0
    r = pb.copy()
    beta = np.linalg.norm(r)
    while n_it < maxit:
        if beta <= tol * nb:
            return x, n_it
        m = restart
        # a real b with a complex operator needs a complex basis; the first product decides
        w0 = precond(matvec(r / beta))
        dtype = np.result_type(x.dtype, r.dtype, w0.dtype)
        x = x.astype(dtype, copy=False)
        V = np.zeros((m + 1, len(b)), dtype=dtype)
        H = np.zeros((m + 1, m), dtype=V.dtype)
        cs = np.zeros(m, dtype=V.dtype)
        sn = np.zeros(m, dtype=V.dtype)
        g = np.zeros(m + 1, dtype=V.dtype)
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        beta_start = beta
        for k in range(m):
            w = w0 if k == 0 else precond(matvec(V[k]))
            for j in range(k + 1):  # modified Gram-Schmidt
                H[j, k] = np.vdot(V[j], w)
                w = w - H[j, k] * V[j]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] != 0:
                V[k + 1] = w / H[k + 1, k]
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -np.conj(sn[j]) * H[j, k] + np.conj(cs[j]) * H[j + 1, k]
                H[j, k] = t
            c, s = _givens(H[k, k], H[k + 1, k])
            cs[k], sn[k] = c, s
            H[k, k] = c * H[k, k] + s * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -np.conj(s) * g[k]
            g[k] = c * g[k]
            n_it += 1
            k_done = k + 1
            if abs(g[k + 1]) <= tol * nb or n_it >= maxit:
                break
        y = sla.solve_triangular(H[:k_done, :k_done], g[:k_done], check_finite=False)
        x = x + V[:k_done].T @ y
        r = precond(b - matvec(x))
        beta = np.linalg.norm(r)
        if beta <= tol * nb:
            return x, n_it
        if beta >= beta_start * (1 - 1e-14):
            raise StagnationError(f"no progress over a restart cycle (residual {beta / nb:.3e})")
    return x, n_it


def _givens(a, b):
    # complex Givens rotation with c real: [c s; -conj(s) c] [a; b] = [r; 0]
    if b == 0:
        return 1.0, 0.0
    if a == 0:
        return 0.0, np.conj(b) / abs(b)
    na = abs(a)
    nrm = np.hypot(na, abs(b))
    c = na / nrm
    s = (a / na) * np.conj(b) / nrm
    return c, s
