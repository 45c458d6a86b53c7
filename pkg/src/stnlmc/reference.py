"""Fine-grid reference solver: the stand-in for the exact solution.

The conforming affine-in-time trial space with time-integrated testing
reduces to a theta-scheme march on the fine spatial Q1 mesh:

    (M/dt + theta A_k) u_k = (M/dt - (1-theta) A_k) u_{k-1}
                             + theta L(t_k) + (1-theta) L(t_{k-1})

with A_k the stiffness matrix for kappa frozen on fine interval k (midpoint
value) and L the load vector by the shared quadrature. theta = 0.5 is the
Crank-Nicolson realization of the space-time Galerkin scheme. This solver
shares the spatial assembly kernels with the forms module but none of the
multiscale code paths.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import linsolve
from .forms import q1_load_cells, q1_mass_cells, q1_stiffness_cells, gauss_points_xy
from .grid import SpaceTimeGrid, full_region
from .medium import PermeabilityField


@dataclass
class ReferenceSolution:
    """Fine nodal values over all fine time levels, zero at t=0 and on the boundary."""

    values: np.ndarray  # (nt_fine + 1, n_nodes)
    theta: float
    grid: SpaceTimeGrid
    field_hash: str


def solve_reference(grid: SpaceTimeGrid, field: PermeabilityField, f,
                    theta: float = 0.5) -> ReferenceSolution:
    """Theta-scheme march of the parabolic problem on the fine grid."""
    if not 0.5 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0.5, 1], got {theta}")
    fs = grid.fine_space
    dt = grid.fine_time.dt
    region = full_region(grid)
    nnx, nny = fs.nx + 1, fs.ny + 1
    interior = np.ones((nny, nnx), dtype=bool)
    interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
    idx = np.flatnonzero(interior.ravel())

    M = q1_mass_cells(fs.nx, fs.ny, fs.hx, fs.hy)[idx][:, idx]
    X, Y = gauss_points_xy(grid, region)

    def load(t):
        return q1_load_cells(f(X, Y, t), fs.nx, fs.ny, fs.hx, fs.hy)[idx]

    values = np.zeros((grid.fine_time.nt + 1, nnx * nny))
    u = np.zeros(idx.size)
    lhs = None
    A = None
    prev_pattern = None
    L_prev = load(0.0)
    for k in range(1, grid.fine_time.nt + 1):
        kap = field.kappa_cells(grid, region, k)
        pattern = kap.tobytes()
        if pattern != prev_pattern:
            A = q1_stiffness_cells(kap, fs.nx, fs.ny, fs.hx, fs.hy)[idx][:, idx]
            lhs = linsolve.factorize(M / dt + theta * A, symmetric_pattern=True)
            prev_pattern = pattern
        L_k = load(k * dt)
        rhs = M @ (u / dt) - (1.0 - theta) * (A @ u) + theta * L_k + (1.0 - theta) * L_prev
        u = lhs.solve(rhs)
        values[k, idx] = u
        L_prev = L_k
    digest = hashlib.blake2b(repr((field.kappa_matrix, field.channels)).encode(),
                             digest_size=8).hexdigest()
    return ReferenceSolution(values, theta, grid, digest)
