"""Matrix entries for the 2D Laplace and Lippmann-Schwinger (Helmholtz) systems.

Both operators are discretised by piecewise-constant collocation on the
uniform cell-centre grid of :mod:`rskel.geometry`. Off-diagonal entries are
plain kernel evaluations; diagonal entries integrate the singular kernel over
one grid cell with an adaptive tensor Gauss rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import special

from .geometry import Box

__all__ = [
    "KernelSpec",
    "ProxySurface",
    "QuadratureError",
    "adaptive_quad2d",
    "assemble_block",
    "gaussian_bump",
    "hankel0",
    "helmholtz_diag",
    "helmholtz_offdiag",
    "laplace_diag",
    "laplace_offdiag",
    "plane_wave",
    "proxy_points",
]

LAPLACE = "laplace"
HELMHOLTZ = "helmholtz"


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


# ---------------------------------------------------------------------------
# special functions and closed-form pieces

def hankel0(z):
    """First-kind Hankel function of order zero, ``J0(z) + i Y0(z)``, for real ``z > 0``."""
    z = np.asarray(z, dtype=float)
    return special.j0(z) + 1j * special.y0(z)


def gaussian_bump(x, center=(0.5, 0.5), width=32.0):
    """Scattering potential ``exp(-width * |x - center|^2)``.

    ``x`` may be a single point or an ``(n, 2)`` array.
    """
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(center, dtype=float)
    return np.exp(-width * np.sum(d * d, axis=-1))


def plane_wave(x, kappa, direction=(1.0, 0.0)):
    """Incoming plane wave ``exp(i kappa d.x)`` travelling along ``direction``."""
    x = np.asarray(x, dtype=float)
    return np.exp(1j * kappa * (x @ np.asarray(direction, dtype=float)))


# ---------------------------------------------------------------------------
# adaptive quadrature

_GL_ORDER = 10
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER)


def _panel_rule(f, x0, x1, y0, y1):
    hx, hy = 0.5 * (x1 - x0), 0.5 * (y1 - y0)
    xs = x0 + hx * (_GL_NODES + 1.0)
    ys = y0 + hy * (_GL_NODES + 1.0)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    W = np.outer(_GL_WEIGHTS, _GL_WEIGHTS) * (hx * hy)
    return np.sum(W * f(X, Y))


def adaptive_quad2d(f, x0, x1, y0, y1, rtol=1e-10, max_depth=60, max_panels=200_000):
    """Integrate ``f(X, Y)`` over a rectangle by recursive panel subdivision.

    ``f`` must accept arrays. A panel is accepted when its 10x10 Gauss value
    agrees with the sum over its four children to within its share (by area)
    of ``rtol`` times the running estimate of the total.
    """
    total_area = (x1 - x0) * (y1 - y0)
    guess = _panel_rule(f, x0, x1, y0, y1)
    stack = [(x0, x1, y0, y1, guess, 0)]
    result = 0.0
    n_panels = 0
    worst = 0.0
    while stack:
        a, b, c, d, coarse, depth = stack.pop()
        xm, ym = 0.5 * (a + b), 0.5 * (c + d)
        kids = [(a, xm, c, ym), (xm, b, c, ym), (a, xm, ym, d), (xm, b, ym, d)]
        vals = [_panel_rule(f, *k) for k in kids]
        fine = sum(vals)
        n_panels += 4
        scale = max(abs(guess), abs(result + fine), np.finfo(float).tiny)
        allowed = rtol * scale * ((b - a) * (d - c) / total_area)
        err = abs(fine - coarse)
        if err <= allowed:
            result += fine
            continue
        if depth >= max_depth or n_panels > max_panels:
            worst = max(worst, err / scale)
            result += fine
            continue
        stack.extend((*k, v, depth + 1) for k, v in zip(kids, vals))
    if worst > rtol:
        raise QuadratureError(f"adaptive quadrature stopped at relative error ~{worst:.2e} (target {rtol:.1e})")
    return result


# ---------------------------------------------------------------------------
# scalar entry formulas

def laplace_offdiag(xi, xj, h):
    """``-(h^2 / 2 pi) log |xi - xj|``."""
    r = float(np.hypot(*(np.asarray(xi, float) - np.asarray(xj, float))))
    if r == 0.0:
        raise ValueError("coincident points: use laplace_diag for diagonal entries")
    return -(h * h) / (2.0 * math.pi) * math.log(r)


def laplace_diag(h, rtol=1e-10):
    """Integral of ``-(1/2 pi) log |x|`` over the cell ``[-h/2, h/2]^2``."""
    if h <= 0:
        raise ValueError("h must be positive")
    a = 0.5 * h
    quadrant = adaptive_quad2d(lambda x, y: np.log(np.hypot(x, y)), 0.0, a, 0.0, a, rtol=rtol)
    return -4.0 * quadrant / (2.0 * math.pi)


def helmholtz_offdiag(xi, xj, h, kappa, b=None):
    """``h^2 kappa^2 sqrt(b(xi) b(xj)) (i/4) H0(kappa |xi - xj|)``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    xi, xj = np.asarray(xi, float), np.asarray(xj, float)
    r = float(np.hypot(*(xi - xj)))
    if r == 0.0:
        raise ValueError("coincident points: use helmholtz_diag for diagonal entries")
    b = gaussian_bump if b is None else b
    w = math.sqrt(float(b(xi)) * float(b(xj)))
    return h * h * kappa * kappa * w * 0.25j * complex(hankel0(kappa * r))


def _helmholtz_cell_integral(h, kappa, rtol=1e-10):
    # (i/4) int_{[-h/2,h/2]^2} H0(kappa |x|) dx, via the four symmetric quadrants
    a = 0.5 * h
    re = adaptive_quad2d(lambda x, y: special.j0(kappa * np.hypot(x, y)), 0.0, a, 0.0, a, rtol=rtol)
    im = adaptive_quad2d(lambda x, y: special.y0(kappa * np.hypot(x, y)), 0.0, a, 0.0, a, rtol=rtol)
    return 0.25j * 4.0 * (re + 1j * im)


def helmholtz_diag(xi, h, kappa, b=None, rtol=1e-10):
    """``1 + kappa^2 b(xi) (i/4) int_cell H0(kappa |x|) dx``."""
    if h <= 0 or kappa <= 0:
        raise ValueError("h and kappa must be positive")
    b = gaussian_bump if b is None else b
    bx = float(b(np.asarray(xi, float)))
    if bx == 0.0:
        return 1.0 + 0.0j
    return 1.0 + kappa * kappa * bx * _helmholtz_cell_integral(h, kappa, rtol)


# ---------------------------------------------------------------------------
# kernel specification and block assembly

@dataclass
class KernelSpec:
    """Which operator to discretise, and its parameters.

    Use :meth:`laplace` or :meth:`helmholtz` rather than the bare constructor.
    """

    kind: str
    h: float
    kappa: float = 0.0
    potential: Callable | None = None
    quad_rtol: float = 1e-10
    n_proxy: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def laplace(cls, h, **kw):
        return cls(LAPLACE, h, **kw)

    @classmethod
    def helmholtz(cls, h, kappa, potential=gaussian_bump, **kw):
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        return cls(HELMHOLTZ, h, kappa=kappa, potential=potential, **kw)

    def __post_init__(self):
        if self.kind not in (LAPLACE, HELMHOLTZ):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.h <= 0:
            raise ValueError("grid spacing h must be positive")

    @property
    def is_complex(self) -> bool:
        return self.kind == HELMHOLTZ

    @property
    def dtype(self):
        return np.complex128 if self.is_complex else np.float64

    @cached_property
    def cell_integral(self):
        if self.kind == LAPLACE:
            return laplace_diag(self.h, self.quad_rtol)
        return _helmholtz_cell_integral(self.h, self.kappa, self.quad_rtol)

    def sqrt_potential(self, points):
        # one run uses one grid; cache sqrt(b) for it so every block sees identical values
        cached = self.extra.get("_sqrt_b")
        if cached is None or cached[0] is not points:
            cached = (points, np.sqrt(self.potential(points)))
            self.extra["_sqrt_b"] = cached
        return cached[1]

    def default_n_proxy(self, side_length: float) -> int:
        if self.n_proxy is not None:
            return self.n_proxy
        if self.kind == HELMHOLTZ:
            return max(64, math.ceil(8.0 * self.kappa * side_length))
        return 64

    def block(self, rows, cols, points):
        """Dense block of matrix entries; the diagonal rule is used where ``row == col``."""
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        X, Y = points[rows], points[cols]
        r = np.hypot(X[:, 0, None] - Y[None, :, 0], X[:, 1, None] - Y[None, :, 1])
        same = rows[:, None] == cols[None, :]
        has_diag = bool(same.any())
        if has_diag:
            r[same] = 1.0
        if self.kind == LAPLACE:
            out = (-(self.h * self.h) / (2.0 * math.pi)) * np.log(r)
            if has_diag:
                out[same] = self.cell_integral
            return out
        sb = self.sqrt_potential(points)
        w = sb[rows][:, None] * sb[cols][None, :]
        k = self.kappa
        out = ((self.h * self.h * k * k) * w) * (0.25j * hankel0(k * r))
        if has_diag:
            bi = np.broadcast_to(w, same.shape)[same]  # sqrt(b_i)^2 on the diagonal
            out[same] = 1.0 + (k * k) * bi * self.cell_integral
        return out

    def proxy_block(self, proxy, cols, points):
        """Kernel interaction between proxy points (rows) and grid points ``cols``."""
        cols = np.asarray(cols, dtype=np.intp)
        Y = points[cols]
        r = np.hypot(proxy[:, 0, None] - Y[None, :, 0], proxy[:, 1, None] - Y[None, :, 1])
        if self.kind == LAPLACE:
            return (-(self.h * self.h) / (2.0 * math.pi)) * np.log(r)
        k = self.kappa
        sb = self.sqrt_potential(points)[cols]
        return ((self.h * self.h * k * k) * sb[None, :]) * (0.25j * hankel0(k * r))


def assemble_block(spec: KernelSpec, rows, cols, points) -> np.ndarray:
    """Dense ``len(rows) x len(cols)`` block of the system matrix."""
    return spec.block(rows, cols, np.asarray(points, dtype=float))


# ---------------------------------------------------------------------------
# proxy surfaces

PROXY_RADIUS_RATIO = 2.5


@dataclass(frozen=True)
class ProxySurface:
    center: np.ndarray
    radius: float
    points: np.ndarray


def proxy_points(b: Box, n_proxy: int) -> ProxySurface:
    """``n_proxy`` equispaced points on the circle of radius 2.5 box sides around ``b``."""
    if n_proxy < 4:
        raise ValueError("n_proxy must be >= 4")
    c = b.center
    radius = PROXY_RADIUS_RATIO * b.side_length
    theta = 2.0 * math.pi * np.arange(n_proxy) / n_proxy
    pts = np.column_stack([c[0] + radius * np.cos(theta), c[1] + radius * np.sin(theta)])
    return ProxySurface(center=c, radius=radius, points=pts)
