"""Scattering of a plane wave off a Gaussian bump, solved with preconditioned GMRES.

The scattered field u solves (I + kappa^2 sqrt(b) G sqrt(b)) mu = -kappa^2 sqrt(b) u_in
in the symmetric form used by the kernel. Pass a CSV path to dump x, y, |u|.

    python demos/helmholtz_scattering.py [kappa] [out.csv]
"""
import sys

import numpy as np

from rskel import KernelSpec, factorize, make_grid
from rskel.kernels import gaussian_bump, plane_wave
from rskel.solve import dense_matvec, gmres, relres

kappa = float(sys.argv[1]) if len(sys.argv) > 1 else 25.0
n_side = 64
points = make_grid(n_side)
spec = KernelSpec.helmholtz(1.0 / n_side, kappa)
sq = np.sqrt(gaussian_bump(points))
rhs = -kappa ** 2 * sq * plane_wave(points, kappa)

f = factorize(points, spec, 1e-6)
matvec = lambda v: dense_matvec(spec, points, v)
mu, n_it = gmres(matvec, f.solve, rhs, tol=1e-10)
print(f"kappa={kappa:g}  N={len(points)}  GMRES iterations {n_it}  relres {relres(matvec, mu, rhs):.1e}")

# mu is the scaled density; sqrt(b) mu is the scattered field's source
u = sq * mu
print(f"max |sqrt(b) mu|{np.abs(u).max():.3f} at {points[np.argmax(np.abs(u))]}")

if len(sys.argv) > 2:
    np.savetxt(sys.argv[2], np.column_stack([points, np.abs(mu)]), delimiter=",", header="x,y,abs_mu",
               comments="")
    print("wrote", sys.argv[2])
