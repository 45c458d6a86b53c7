"""Fine-scale space-time finite-element spaces and bilinear-form assembly.

Fine cells carry Q1 (bilinear) shape functions in space tensored with P1
(affine) functions in time. All integrals use the same quadrature: 2-point
Gauss per spatial axis and per time axis, with kappa constant per fine cell
and kappa-tilde evaluated pointwise at the spatial Gauss points. The forms:

    a(v, w) = int kappa grad v . grad w
    b(v, w) = int (dv/dt) w
    e(v, w) = sum over coarse slabs of int kappa-tilde^-1 (dv/dt)(dw/dt)
    s(v, w) = int kappa-tilde v w

with c = a + b and d = c + e assembled by addition.

Three space flavors over an oversampled region and time window:

* ``conforming``: continuous in time over the window, zero at the window
  start, zero on the region's lateral boundary (the trial space);
* ``causal``: same degree-of-freedom set, but the temporal basis function of
  each level is the single ascending ramp on the interval ending at that
  level. Testing against this flavor makes every assembled operator block
  lower-triangular across fine time levels, which is what lets local and
  global solves march causally and makes truncation in time exact;
* ``broken``: continuous within each coarse slab, discontinuous across slab
  interfaces, no initial condition (the discrete V_d; used for diagnostics).

Degrees of freedom are space-major within a time level, levels ascending.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .grid import Region, SpaceTimeGrid
from .medium import GAUSS_PTS, PartitionOfUnity, PermeabilityField, tilde_kappa_gauss

# reference Q1 element matrices, node order (0,0),(1,0),(0,1),(1,1)
_KX = np.array([[2, -2, 1, -1], [-2, 2, -1, 1], [1, -1, 2, -2], [-1, 1, -2, 2]]) / 6.0
_KY = np.array([[2, 1, -2, -1], [1, 2, -1, -2], [-2, -1, 2, 1], [-1, -2, 1, 2]]) / 6.0
_MASS = np.array([[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]]) / 36.0

# Q1 shape values at the 2x2 Gauss points, points ordered (gy, gx) row-major
_NG = np.empty((4, 4))
for _gi, (_gy, _gx) in enumerate([(a, b) for a in GAUSS_PTS for b in GAUSS_PTS]):
    _NG[_gi] = [(1 - _gx) * (1 - _gy), _gx * (1 - _gy), (1 - _gx) * _gy, _gx * _gy]

# temporal coupling tables on one fine interval, scaled by dt outside;
# row = test time-function (0 descending, 1 ascending), col = trial
T_MASS = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])     # int theta_c theta_r / dt
T_DT = np.array([[-0.5, 0.5], [-0.5, 0.5]])             # int theta_c' theta_r
T_STIFF = np.array([[1.0, -1.0], [-1.0, 1.0]])          # int theta_c' theta_r' * dt


def _cell_node_ids(nx: int, ny: int) -> np.ndarray:
    """(ncells, 4) global node ids of each cell of an nx x ny cell grid."""
    cx, cy = np.meshgrid(np.arange(nx), np.arange(ny))
    base = cy.ravel() * (nx + 1) + cx.ravel()
    return np.column_stack([base, base + 1, base + nx + 1, base + nx + 2])


def _scatter(cell_mats: np.ndarray, conn: np.ndarray, nnodes: int) -> sp.csr_matrix:
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    return sp.coo_matrix((cell_mats.reshape(-1), (rows, cols)),
                         shape=(nnodes, nnodes)).tocsr()


def q1_stiffness_cells(kap: np.ndarray, nx: int, ny: int, hx: float, hy: float) -> sp.csr_matrix:
    """Stiffness matrix int kappa grad N . grad N with kappa constant per cell."""
    ref = (hy / hx) * _KX + (hx / hy) * _KY
    conn = _cell_node_ids(nx, ny)
    cell_mats = kap.reshape(-1)[:, None, None] * ref[None]
    return _scatter(cell_mats, conn, (nx + 1) * (ny + 1))


def q1_mass_cells(nx: int, ny: int, hx: float, hy: float) -> sp.csr_matrix:
    conn = _cell_node_ids(nx, ny)
    cell_mats = np.broadcast_to(hx * hy * _MASS, (nx * ny, 4, 4))
    return _scatter(cell_mats, conn, (nx + 1) * (ny + 1))


def q1_weighted_mass_cells(w_gauss: np.ndarray, nx: int, ny: int,
                           hx: float, hy: float) -> sp.csr_matrix:
    """Mass matrix int w N N with w given at the 2x2 Gauss points, (ny, nx, 4)."""
    conn = _cell_node_ids(nx, ny)
    wq = w_gauss.reshape(-1, 4) * (hx * hy / 4.0)
    cell_mats = np.einsum("cg,ga,gb->cab", wq, _NG, _NG)
    return _scatter(cell_mats, conn, (nx + 1) * (ny + 1))


def q1_load_cells(f_gauss: np.ndarray, nx: int, ny: int, hx: float, hy: float) -> np.ndarray:
    """Load vector int f N with f at the Gauss points, (ny, nx, 4)."""
    fq = f_gauss.reshape(-1, 4) * (hx * hy / 4.0)
    cell_loads = fq @ _NG
    out = np.zeros((nx + 1) * (ny + 1))
    np.add.at(out, _cell_node_ids(nx, ny).ravel(), cell_loads.ravel())
    return out


def gauss_points_xy(grid: SpaceTimeGrid, region: Region):
    """Physical (x, y) spatial Gauss coordinates over the region's fine cells.

    Returns arrays of shape (ncy, ncx, 4) matching the Gauss ordering of the
    element tables.
    """
    fs = grid.fine_space
    fx0, fx1, fy0, fy1 = region.fine_cell_ranges(grid)
    gx = fs.x0 + (np.arange(fx0, fx1)[:, None] + GAUSS_PTS[None, :]) * fs.hx
    gy = fs.y0 + (np.arange(fy0, fy1)[:, None] + GAUSS_PTS[None, :]) * fs.hy
    ncx, ncy = fx1 - fx0, fy1 - fy0
    X = np.empty((ncy, ncx, 2, 2))
    Y = np.empty((ncy, ncx, 2, 2))
    X[:] = gx[None, :, None, :]
    Y[:] = gy[:, None, :, None]
    return X.reshape(ncy, ncx, 4), Y.reshape(ncy, ncx, 4)


class RegionNodes:
    """Fine-node bookkeeping for one spatial region.

    Degrees of freedom live on the interior nodes of the region's fine
    sub-grid (zero lateral boundary). ``global_ids`` maps local interior
    index to the full-domain flat node index.
    """

    def __init__(self, grid: SpaceTimeGrid, region: Region):
        self.grid = grid
        self.region = region
        nnx, nny = region.fine_node_shape(grid)
        self.nnx, self.nny = nnx, nny
        interior = np.ones((nny, nnx), dtype=bool)
        interior[0, :] = interior[-1, :] = False
        interior[:, 0] = interior[:, -1] = False
        self.interior_mask = interior
        self.interior_ids = np.flatnonzero(interior.ravel())
        self.n_interior = self.interior_ids.size
        if self.n_interior == 0:
            raise ValueError("region has no interior fine nodes; enlarge it or refine")
        # local (all-node) index -> interior dof index, -1 on the boundary
        self.to_interior = np.full(nnx * nny, -1, dtype=np.int64)
        self.to_interior[self.interior_ids] = np.arange(self.n_interior)
        fx0, _, fy0, _ = region.fine_cell_ranges(grid)
        fs = grid.fine_space
        jx = self.interior_ids % nnx + fx0
        jy = self.interior_ids // nnx + fy0
        self.global_ids = jy * (fs.nx + 1) + jx

    def restrict(self, mat: sp.csr_matrix) -> sp.csr_matrix:
        """Restrict an all-node matrix to interior x interior."""
        return mat[self.interior_ids][:, self.interior_ids]

    def restrict_vec(self, vec: np.ndarray) -> np.ndarray:
        return vec[self.interior_ids]


class FineSpace:
    """Discrete trial/test space on a region x window, one of the three flavors."""

    FLAVORS = ("conforming", "causal", "broken")

    def __init__(self, grid: SpaceTimeGrid, region: Region, flavor: str = "conforming"):
        if flavor not in self.FLAVORS:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.grid = grid
        self.region = region
        self.flavor = flavor
        self.nodes = RegionNodes(grid, region)
        rt = grid.rt
        if flavor in ("conforming", "causal"):
            self.levels = list(region.fine_levels(grid))
            self._level_pos = {lvl: p for p, lvl in enumerate(self.levels)}
            self.nblocks = len(self.levels)
        else:
            # per slab: local levels 0..rt, the slab-start level duplicated
            self.block_keys = [(s, loc) for s in region.slabs() for loc in range(rt + 1)]
            self._block_pos = {key: p for p, key in enumerate(self.block_keys)}
            self.nblocks = len(self.block_keys)
        self.ndof = self.nblocks * self.nodes.n_interior

    def active(self, k: int):
        """Temporal couplings on fine interval k: list of (tau, level-block index).

        tau 0 is the descending shape on the interval, tau 1 the ascending one.
        """
        rt = self.grid.rt
        if self.flavor == "conforming":
            out = []
            if k - 1 in self._level_pos:
                out.append((0, self._level_pos[k - 1]))
            out.append((1, self._level_pos[k]))
            return out
        if self.flavor == "causal":
            return [(1, self._level_pos[k])]
        s = (k - 1) // rt
        loc = k - s * rt
        return [(0, self._block_pos[(s, loc - 1)]), (1, self._block_pos[(s, loc)])]

    def dof_slice(self, block: int) -> slice:
        nin = self.nodes.n_interior
        return slice(block * nin, (block + 1) * nin)

    def embed_in_broken(self, vec: np.ndarray, broken: "FineSpace") -> np.ndarray:
        """Inject a conforming coefficient vector into the broken space."""
        if self.flavor != "conforming" or broken.flavor != "broken":
            raise ValueError("embedding goes from conforming into broken")
        out = np.zeros(broken.ndof)
        rt = self.grid.rt
        for p, lvl in enumerate(self.levels):
            s = (lvl - 1) // rt
            out[broken.dof_slice(broken._block_pos[(s, lvl - s * rt)])] = vec[self.dof_slice(p)]
            if lvl % rt == 0 and lvl < self.levels[-1]:
                # interface level value is shared with the next slab's start dof
                out[broken.dof_slice(broken._block_pos[(s + 1, 0)])] = vec[self.dof_slice(p)]
        return out

    def to_level_array(self, vec: np.ndarray) -> np.ndarray:
        """Conforming coefficients -> (nlevels+1, nny, nnx) nodal values with zeros
        at the window start and on the lateral boundary."""
        if self.flavor != "conforming":
            raise ValueError("only conforming vectors correspond to nodal level values")
        nin = self.nodes.n_interior
        out = np.zeros((len(self.levels) + 1, self.nodes.nny * self.nodes.nnx))
        for p in range(len(self.levels)):
            out[p + 1, self.nodes.interior_ids] = vec[p * nin:(p + 1) * nin]
        return out.reshape(len(self.levels) + 1, self.nodes.nny, self.nodes.nnx)


def _check_regions(test: FineSpace, trial: FineSpace):
    if test.region != trial.region or test.grid is not trial.grid:
        raise ValueError("test and trial spaces must share the same region and grid")


def _spatial_dims(space: FineSpace):
    reg, grid = space.region, space.grid
    fx0, fx1, fy0, fy1 = reg.fine_cell_ranges(grid)
    fs = grid.fine_space
    return fx1 - fx0, fy1 - fy0, fs.hx, fs.hy


def _assemble_spacetime(test: FineSpace, trial: FineSpace, spatial_of_k, table) -> sp.csr_matrix:
    """Sum over fine intervals of (temporal table) x (interval spatial matrix)."""
    _check_regions(test, trial)
    grid = test.grid
    nin = test.nodes.n_interior
    parts = []
    for k in test.region.fine_intervals(grid):
        smat = spatial_of_k(k).tocoo()
        for tau_r, br in test.active(k):
            for tau_c, bc in trial.active(k):
                coeff = table[tau_r, tau_c]
                if coeff == 0.0:
                    continue
                parts.append((coeff * smat.data, smat.row + br * nin, smat.col + bc * nin))
    data = np.concatenate([p[0] for p in parts])
    rows = np.concatenate([p[1] for p in parts])
    cols = np.concatenate([p[2] for p in parts])
    out = sp.coo_matrix((data, (rows, cols)), shape=(test.ndof, trial.ndof))
    return out.tocsr()


def assemble_a(field: PermeabilityField, test: FineSpace, trial: FineSpace) -> sp.csr_matrix:
    """Stiffness form: int kappa grad v . grad w over the region x window."""
    ncx, ncy, hx, hy = _spatial_dims(test)
    grid, reg, nodes = test.grid, test.region, test.nodes
    dt = grid.fine_time.dt

    def spatial(k):
        kap = field.kappa_cells(grid, reg, k)
        return nodes.restrict(q1_stiffness_cells(kap, ncx, ncy, hx, hy))

    return _assemble_spacetime(test, trial, spatial, dt * T_MASS)


def assemble_b(test: FineSpace, trial: FineSpace) -> sp.csr_matrix:
    """Time-derivative form: int (dv/dt) w, v trial, w test."""
    ncx, ncy, hx, hy = _spatial_dims(test)
    nodes = test.nodes
    mass = nodes.restrict(q1_mass_cells(ncx, ncy, hx, hy))
    return _assemble_spacetime(test, trial, lambda k: mass, T_DT)


def assemble_e(pou: PartitionOfUnity, field: PermeabilityField,
               test: FineSpace, trial: FineSpace) -> sp.csr_matrix:
    """Inverse-weighted temporal form, summed per coarse slab.

    The slab-wise sum is automatic: each fine interval lies in one slab and
    broken spaces carry per-slab degrees of freedom, so jumps never couple.
    """
    ncx, ncy, hx, hy = _spatial_dims(test)
    grid, reg, nodes = test.grid, test.region, test.nodes
    dt = grid.fine_time.dt

    def spatial(k):
        tk = tilde_kappa_gauss(pou, field, reg, k)
        if np.any(tk <= 0):
            raise ArithmeticError("kappa-tilde must be positive at quadrature points")
        return nodes.restrict(q1_weighted_mass_cells(1.0 / tk, ncx, ncy, hx, hy))

    return _assemble_spacetime(test, trial, spatial, T_STIFF / dt)


def assemble_s(pou: PartitionOfUnity, field: PermeabilityField,
               test: FineSpace, trial: FineSpace) -> sp.csr_matrix:
    """Weighted mass form: int kappa-tilde v w."""
    ncx, ncy, hx, hy = _spatial_dims(test)
    grid, reg, nodes = test.grid, test.region, test.nodes
    dt = grid.fine_time.dt

    def spatial(k):
        tk = tilde_kappa_gauss(pou, field, reg, k)
        if np.any(tk <= 0):
            raise ArithmeticError("kappa-tilde must be positive at quadrature points")
        return nodes.restrict(q1_weighted_mass_cells(tk, ncx, ncy, hx, hy))

    return _assemble_spacetime(test, trial, spatial, dt * T_MASS)


def assemble_d(pou: PartitionOfUnity, field: PermeabilityField,
               test: FineSpace, trial: FineSpace) -> sp.csr_matrix:
    """The full operator d = a + b + e."""
    return (assemble_a(field, test, trial) + assemble_b(test, trial)
            + assemble_e(pou, field, test, trial))


def assemble_c(field: PermeabilityField, test: FineSpace, trial: FineSpace) -> sp.csr_matrix:
    """c = a + b."""
    return assemble_a(field, test, trial) + assemble_b(test, trial)


def rhs_f(space: FineSpace, f) -> np.ndarray:
    """Load vector int f w for a callable f(x, y, t)."""
    ncx, ncy, hx, hy = _spatial_dims(space)
    grid, reg, nodes = space.grid, space.region, space.nodes
    dt = grid.fine_time.dt
    X, Y = gauss_points_xy(grid, reg)
    out = np.zeros(space.ndof)
    nin = nodes.n_interior
    theta = np.array([1.0 - GAUSS_PTS, GAUSS_PTS])  # theta[tau, time gauss]
    for k in reg.fine_intervals(grid):
        t_g = (k - 1 + GAUSS_PTS) * dt
        loads = [nodes.restrict_vec(q1_load_cells(f(X, Y, tg), ncx, ncy, hx, hy))
                 for tg in t_g]
        for tau, b in space.active(k):
            acc = sum(0.5 * dt * theta[tau, gi] * loads[gi] for gi in range(2))
            out[b * nin:(b + 1) * nin] += acc
    return out


def constraint_vectors(pou: PartitionOfUnity, field: PermeabilityField,
                       region: Region, nodes: RegionNodes, continua, k: int,
                       measures=None) -> np.ndarray:
    """Per-continuum quadrature vectors Q over the region's interior nodes.

    Row m holds int_{cells of continuum m at interval k} kappa-tilde N_p / m_j
    (the 1/m_j normalization is skipped when ``measures`` is None, which is
    how the weighted measures themselves are computed). Shape (ncont, n_interior).
    """
    grid = pou.grid
    ncx = region.ncx * grid.rx
    ncy = region.ncy * grid.ry
    fs = grid.fine_space
    tk = tilde_kappa_gauss(pou, field, region, k)  # (ncy, ncx, 4)
    wq = tk * (fs.hx * fs.hy / 4.0)
    cell_loads = wq.reshape(-1, 4) @ _NG  # (ncells, 4 nodes)
    conn = _cell_node_ids(ncx, ncy)
    out = np.zeros((len(continua), nodes.nny * nodes.nnx))
    fx0, _, fy0, _ = region.fine_cell_ranges(grid)
    for m, cont in enumerate(continua):
        bn, bi = cont.block
        bcx, bcy = grid.coarse_space.cell_coords(bi)
        loc = cont.cells[k - 1 - bn * grid.rt]  # (ry, rx) mask
        cys, cxs = np.nonzero(loc)
        if cys.size == 0:
            continue
        cell_ids = (cys + bcy * grid.ry - fy0) * ncx + (cxs + bcx * grid.rx - fx0)
        np.add.at(out[m], conn[cell_ids].ravel(), cell_loads[cell_ids].ravel())
    if measures is not None:
        out /= np.asarray(measures)[:, None]
    return out[:, nodes.interior_ids]


def assemble_s_aux(pou: PartitionOfUnity, field: PermeabilityField, space: FineSpace,
                   continua, measures) -> sp.csr_matrix:
    """s-pairing of the space against the auxiliary functions, (ndof x ncont).

    Column m is s(., psi_m) with psi_m the normalized indicator of continuum m.
    """
    grid = space.grid
    reg = space.region
    dt = grid.fine_time.dt
    nin = space.nodes.n_interior
    rows, cols, vals = [], [], []
    by_slab: dict[int, list[int]] = {}
    for m, cont in enumerate(continua):
        by_slab.setdefault(cont.block[0], []).append(m)
    for s, ms in by_slab.items():
        for k in reg.slab_intervals(grid, s):
            Q = constraint_vectors(pou, field, reg, space.nodes,
                                   [continua[m] for m in ms], k,
                                   [measures[m] for m in ms])
            for tau, b in space.active(k):
                for jm, m in enumerate(ms):
                    col = Q[jm] * (dt / 2.0)
                    idx = np.nonzero(col)[0]
                    rows.append(b * nin + idx)
                    cols.append(np.full(idx.size, m))
                    vals.append(col[idx])
    out = sp.coo_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(space.ndof, len(continua)))
    return out.tocsr()
