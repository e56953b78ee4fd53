"""Strong recursive skeletonization: a fast direct solver for 2D kernel systems."""
from .geometry import Box, QuadTree, build_tree, make_grid
from .kernels import KernelSpec, gaussian_bump
from .driver import Factorization, factorize, rank_report
from .solve import apply_inverse, dense_matvec, gmres, pcg
from .parallel import Communicator, compatible_order, parallel_factorize, partition_domain

__all__ = [
    "Box", "QuadTree", "build_tree", "make_grid",
    "KernelSpec", "gaussian_bump",
    "Factorization", "factorize", "rank_report",
    "apply_inverse", "dense_matvec", "gmres", "pcg",
    "Communicator", "compatible_order", "parallel_factorize", "partition_domain",
]
__version__ = "0.1.0"
