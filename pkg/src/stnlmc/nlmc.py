"""Non-local multi-continua core: auxiliary basis, constrained local solves,
coarse system assembly, causal coarse marching and downscaling.

Every coarse space-time block (n, i) carries one auxiliary function per
continuum: piecewise constant on the continuum, normalized to unit
kappa-tilde-weighted integral. Multiscale basis functions solve, on the
block's oversampled region,

    d(phi, w) - sum_m lambda_m s(psi_m, w) = 0   for all test w,
    s(phi, psi_m) = delta_m                      for all psi_m in the region,

with the conforming trial flavor and the causal test flavor of
:mod:`stnlmc.forms`. Because the causal test functions live on single fine
intervals, the saddle system is block lower-triangular across time: each
coarse slab is solved by marching fine intervals with one reusable 2D
factorization per interval, and the slab's multipliers come from a small
dense Schur complement. Shortening the time window therefore truncates the
solution exactly, which is what makes localized and global solves agree
wherever their regions coincide.

The coarse matrix needs, per block, only the multiplier components of the
block's own continua across all unit-constraint columns. Those are rows of
the inverse saddle operator, so they are computed by one *adjoint* (transpose)
backward march per continuum instead of one forward march per column.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as dla
import scipy.sparse as sp

from . import linsolve
from .forms import (FineSpace, assemble_d, assemble_s_aux, constraint_vectors,
                    gauss_points_xy, q1_mass_cells, q1_stiffness_cells,
                    q1_weighted_mass_cells, RegionNodes)
from .grid import Region, SpaceTimeGrid, block_region, full_region
from .medium import (GAUSS_PTS, PartitionOfUnity, PermeabilityField,
                     extract_continua, tilde_kappa_gauss)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# auxiliary basis
# --------------------------------------------------------------------------

class AuxiliaryBasis:
    """All auxiliary degrees of freedom, enumerated slab-major.

    ``continua[(n, i)]`` lists the block's continua in a fixed order
    (channel components first, matrix remainder last); ``offset[(n, i)]`` is
    the global id of the block's first auxiliary dof.
    """

    def __init__(self, grid: SpaceTimeGrid, continua: dict):
        self.grid = grid
        self.continua = continua
        self.offset = {}
        count = 0
        self.slab_start = []
        for n in range(grid.coarse_time.nt):
            self.slab_start.append(count)
            for i in range(grid.coarse_space.cell_count):
                self.offset[(n, i)] = count
                count += len(continua[(n, i)])
        self.slab_start.append(count)
        self.n_dofs = count

    def block_dofs(self, n: int, i: int) -> range:
        off = self.offset[(n, i)]
        return range(off, off + len(self.continua[(n, i)]))

    def slab_dofs(self, n: int) -> range:
        return range(self.slab_start[n], self.slab_start[n + 1])

    def slab_of_dof(self, dof: int) -> int:
        return int(np.searchsorted(self.slab_start, dof, side="right") - 1)

    def region_dofs(self, region: Region):
        """Aux dofs inside a region-window: (global ids, per-slab continuum lists)."""
        grid = self.grid
        cs = grid.coarse_space
        ids = []
        slab_conts = {}
        for s in region.slabs():
            conts = []
            for cy in range(region.iy0, region.iy1 + 1):
                for cx in range(region.ix0, region.ix1 + 1):
                    i = cs.cell_index(cx, cy)
                    ids.extend(self.block_dofs(s, i))
                    conts.extend(self.continua[(s, i)])
            slab_conts[s] = conts
        return np.array(ids, dtype=np.int64), slab_conts

    def measures(self) -> np.ndarray:
        out = np.empty(self.n_dofs)
        for (n, i), conts in self.continua.items():
            for j, c in enumerate(conts):
                out[self.offset[(n, i)] + j] = c.weighted_measure
        return out


def build_aux(field: PermeabilityField, grid: SpaceTimeGrid,
              pou: PartitionOfUnity) -> AuxiliaryBasis:
    """Extract continua for every block and normalize their weighted measures."""
    fs = grid.fine_space
    dt = grid.fine_time.dt
    wcell = fs.hx * fs.hy / 4.0
    continua = {}
    for n in range(grid.coarse_time.nt):
        for i in range(grid.coarse_space.cell_count):
            conts = extract_continua(field, grid, (n, i))
            cx, cy = grid.coarse_space.cell_coords(i)
            region = Region(cx, cx, cy, cy, n, n)
            cell_int = np.stack([
                tilde_kappa_gauss(pou, field, region, k).sum(axis=2) * wcell
                for k in region.slab_intervals(grid, n)])  # (rt, ry, rx)
            for j, cont in enumerate(conts):
                cont.weighted_measure = float(dt * cell_int[cont.cells].sum())
                if cont.weighted_measure <= 0:
                    raise ArithmeticError(
                        f"continuum {j} of block (n={n}, i={i}) has zero weighted measure")
            continua[(n, i)] = conts
    return AuxiliaryBasis(grid, continua)


def project_aux(values: np.ndarray, grid: SpaceTimeGrid, field: PermeabilityField,
                pou: PartitionOfUnity, aux: AuxiliaryBasis) -> np.ndarray:
    """Coefficients of the s-orthogonal projection onto the auxiliary space.

    ``values`` is a full-domain fine field (nt_fine+1, n_nodes). The returned
    vector c satisfies pi(v) = sum_j c_j psi_j with s(pi(v), w) = s(v, w) for
    every auxiliary w; concretely c_j is the kappa-tilde-weighted integral of
    v over continuum j.
    """
    dt = grid.fine_time.dt
    out = np.zeros(aux.n_dofs)
    for (n, i), conts in aux.continua.items():
        if not conts:
            continue
        cx, cy = grid.coarse_space.cell_coords(i)
        region = Region(cx, cx, cy, cy, n, n)
        view = _all_node_view(grid, region)
        gids = _region_node_gids(grid, region)
        dofs = aux.block_dofs(n, i)
        for k in region.slab_intervals(grid, n):
            Q = constraint_vectors(pou, field, region, view, conts, k)
            pair = Q @ (values[k][gids] + values[k - 1][gids]) * (dt / 2.0)
            out[dofs.start:dofs.stop] += pair
    return out


class _AllNodeView:
    """RegionNodes stand-in that keeps every node (no lateral-boundary restriction)."""

    def __init__(self, nnx, nny):
        self.nnx, self.nny = nnx, nny
        self.interior_ids = np.arange(nnx * nny)


def _all_node_view(grid: SpaceTimeGrid, region: Region) -> _AllNodeView:
    nnx, nny = region.fine_node_shape(grid)
    return _AllNodeView(nnx, nny)


def _region_node_gids(grid: SpaceTimeGrid, region: Region) -> np.ndarray:
    """Full-domain flat node ids of every node of the region's fine sub-grid."""
    fx0, fx1, fy0, fy1 = region.fine_cell_ranges(grid)
    jx = np.arange(fx0, fx1 + 1)
    jy = np.arange(fy0, fy1 + 1)
    return (jy[:, None] * (grid.fine_space.nx + 1) + jx[None, :]).ravel()


# --------------------------------------------------------------------------
# marching engine
# --------------------------------------------------------------------------

@dataclass
class _SlabFactor:
    """Cached per-(region shape, slab kappa pattern) solve data for one slab."""

    lus: list                      # per local interval: Factorization of D1
    d0: list                       # per local interval: csr D0
    cvecs: list                    # per local interval: csr (naux_s x nin), rows (dt/2) Q
    schur: object                  # dense LU of the slab multiplier Schur matrix
    naux: int
    n_interior: int
    built_s: float = 0.0


class Engine:
    """Shared immutable problem data plus the slab-factor cache."""

    def __init__(self, grid: SpaceTimeGrid, field: PermeabilityField,
                 pou: PartitionOfUnity, aux: AuxiliaryBasis, cache_cap: int = 16):
        self.grid = grid
        self.field = field
        self.pou = pou
        self.aux = aux
        self.cache_cap = cache_cap
        self._cache: dict = {}
        self._cache_order: list = []
        self.stats = {"factor_builds": 0, "factor_hits": 0, "factor_seconds": 0.0}

    # -- cache ---------------------------------------------------------------

    def _key(self, region: Region, s: int):
        intervals = region.slab_intervals(self.grid, s)
        return (region.ncx, region.ncy,
                self.field.fingerprint(self.grid, region, intervals))

    def slab_factor(self, region: Region, s: int, slab_conts) -> _SlabFactor:
        key = self._key(region, s)
        hit = self._cache.get(key)
        if hit is not None:
            self.stats["factor_hits"] += 1
            self._cache_order.remove(key)
            self._cache_order.append(key)
            return hit
        t0 = time.perf_counter()
        factor = self._build_slab_factor(region, s, slab_conts)
        factor.built_s = time.perf_counter() - t0
        self.stats["factor_builds"] += 1
        self.stats["factor_seconds"] += factor.built_s
        self._cache[key] = factor
        self._cache_order.append(key)
        while len(self._cache_order) > self.cache_cap:
            evict = self._cache_order.pop(0)
            del self._cache[evict]
        return factor

    def _build_slab_factor(self, region: Region, s: int, slab_conts) -> _SlabFactor:
        grid, field, pou = self.grid, self.field, self.pou
        fs = grid.fine_space
        dt = grid.fine_time.dt
        nodes = RegionNodes(grid, region)
        nin = nodes.n_interior
        ncx = region.ncx * grid.rx
        ncy = region.ncy * grid.ry
        mass = nodes.restrict(q1_mass_cells(ncx, ncy, fs.hx, fs.hy)).tocsc()
        measures = [c.weighted_measure for c in slab_conts]
        lus, d0s, cvecs = [], [], []
        by_pattern: dict[bytes, int] = {}
        for k in region.slab_intervals(grid, s):
            kap = field.kappa_cells(grid, region, k)
            pat = kap.tobytes()
            if pat in by_pattern:
                ref = by_pattern[pat]
                lus.append(lus[ref])
                d0s.append(d0s[ref])
            else:
                tk = tilde_kappa_gauss(pou, field, region, k)
                stiff = nodes.restrict(q1_stiffness_cells(kap, ncx, ncy, fs.hx, fs.hy))
                einv = nodes.restrict(
                    q1_weighted_mass_cells(1.0 / tk, ncx, ncy, fs.hx, fs.hy))
                d1 = (0.5 * mass + (dt / 3.0) * stiff + (1.0 / dt) * einv).tocsc()
                d0 = (-0.5 * mass + (dt / 6.0) * stiff - (1.0 / dt) * einv).tocsr()
                try:
                    lus.append(linsolve.factorize(d1, symmetric_pattern=True))
                except linsolve.SingularMatrixError as exc:
                    raise linsolve.SingularMatrixError(
                        f"singular interval operator in slab {s} of region {region}: {exc}"
                    ) from exc
                d0s.append(d0)
                by_pattern[pat] = len(lus) - 1
            Q = constraint_vectors(pou, field, region, nodes, slab_conts, k, measures)
            cvecs.append(sp.csr_matrix(Q * (dt / 2.0)))
        naux = len(slab_conts)
        # multiplier responses: forward march of every unit multiplier load
        if naux:
            W_prev = np.zeros((nin, naux))
            schur = np.zeros((naux, naux))
            for loc, k in enumerate(region.slab_intervals(grid, s)):
                rhs = cvecs[loc].toarray().T - d0s[loc] @ W_prev
                W = lus[loc].solve(rhs)
                schur += cvecs[loc] @ (W_prev + W)
                W_prev = W
            try:
                schur_lu = dla.lu_factor(schur)
            except Exception as exc:  # scipy raises LinAlgError on exact singularity
                raise linsolve.SingularMatrixError(
                    f"singular multiplier system in slab {s} of region {region}: {exc}"
                ) from exc
        else:
            schur_lu = None
        return _SlabFactor(lus, d0s, cvecs, schur_lu, naux, nin)

    # -- forward window solve --------------------------------------------------

    def forward_window(self, region: Region, E: np.ndarray, collect: str = "last_slab",
                       check_residual: bool = False):
        """March the constrained window problem for one or many columns.

        ``E`` has shape (n_window_aux, ncols): the constraint right-hand side
        values, ordered like ``aux.region_dofs(region)``. Returns a dict with
        the requested level values, the per-slab multipliers, and the largest
        constraint residual seen (when requested).
        """
        grid = self.grid
        ids, slab_conts = self.aux.region_dofs(region)
        E = np.atleast_2d(np.asarray(E, dtype=float))
        if E.shape[0] != ids.size:
            raise ValueError("constraint value count does not match region aux dofs")
        ncols = E.shape[1]
        levels_out = {}
        lams = {}
        res_max = 0.0
        pos = 0
        u = None
        keep_all = collect == "all"
        for s in region.slabs():
            conts = slab_conts[s]
            fac = self.slab_factor(region, s, conts)
            if u is None:
                u = np.zeros((fac.n_interior, ncols))
            e_s = E[pos:pos + fac.naux]
            pos += fac.naux
            u, lam, levels, res = _forward_slab(
                fac, u, e_s, keep_levels=keep_all or s == region.s1,
                check_residual=check_residual)
            res_max = max(res_max, res)
            lams[s] = lam
            if levels is not None:
                levels_out[s] = levels
        return {"levels": levels_out, "multipliers": lams, "residual": res_max,
                "aux_ids": ids}

    # -- adjoint window solve ---------------------------------------------------

    def coarse_rows(self, n: int, i: int, region: Region) -> tuple[np.ndarray, np.ndarray]:
        """Multiplier rows of the block's own continua across all unit columns.

        Returns (window aux ids, rows) with rows of shape
        (n_own_continua, n_window_aux): entry [j, m] is the multiplier of
        constraint (n, i, j) when the unit constraint sits on window dof m.
        """
        ids, slab_conts = self.aux.region_dofs(region)
        own = self.aux.block_dofs(n, i)
        n_own = len(own)
        rows = np.zeros((n_own, ids.size))
        if n_own == 0:
            return ids, rows
        # position of each slab's aux entries inside the window ordering
        slab_pos = {}
        pos = 0
        for s in region.slabs():
            slab_pos[s] = pos
            pos += len(slab_conts[s])
        own_cols = np.searchsorted(ids[slab_pos[n]:slab_pos[n] + len(slab_conts[n])],
                                   np.array(list(own)))
        inc = None
        for s in reversed(list(region.slabs())):
            conts = slab_conts[s]
            fac = self.slab_factor(region, s, conts)
            if inc is None:
                inc = np.zeros((fac.n_interior, n_own))
            targets = np.zeros((fac.naux, n_own))
            if s == n:
                for j, p in enumerate(own_cols):
                    targets[p, j] = 1.0
            y, _, inc = _adjoint_slab(fac, inc, targets)
            rows[:, slab_pos[s]:slab_pos[s] + fac.naux] = y.T
        return ids, rows


def _forward_slab(fac: _SlabFactor, u_in: np.ndarray, e_s: np.ndarray,
                  keep_levels: bool, check_residual: bool):
    """One slab of the forward march: interface state in, final states out."""
    nin, ncols = u_in.shape
    rt = len(fac.lus)
    # homogeneous march (multipliers off)
    v = u_in
    gv = np.zeros((fac.naux, ncols))
    v_levels = []
    for loc in range(rt):
        v_new = fac.lus[loc].solve(-(fac.d0[loc] @ v)) if v.any() else np.zeros_like(v)
        gv += fac.cvecs[loc] @ (v + v_new)
        v = v_new
        v_levels.append(v)
    if fac.naux:
        lam = dla.lu_solve(fac.schur, e_s - gv)
    else:
        lam = np.zeros((0, ncols))
    # final march with multiplier loads
    phi = u_in
    levels = [] if keep_levels else None
    gphi = np.zeros((fac.naux, ncols))
    for loc in range(rt):
        rhs = fac.cvecs[loc].T @ lam - fac.d0[loc] @ phi
        phi_new = fac.lus[loc].solve(rhs)
        if check_residual:
            gphi += fac.cvecs[loc] @ (phi + phi_new)
        phi = phi_new
        if keep_levels:
            levels.append(phi)
    res = float(np.abs(gphi - e_s).max()) if (check_residual and fac.naux) else 0.0
    return phi, lam, (np.array(levels) if keep_levels else None), res


def _adjoint_slab(fac: _SlabFactor, inc: np.ndarray, targets: np.ndarray):
    """One slab of the backward (transpose) march.

    ``inc`` is the coupling from the already-processed later slab at this
    slab's top level; ``targets`` the right-hand side at this slab's
    multiplier components. Returns (y, z at the slab's first level, coupling
    for the previous slab).
    """
    rt = len(fac.lus)
    nin, ncols = inc.shape
    # homogeneous backward march (y off); store z per level
    h = [None] * (rt + 1)
    h[rt] = fac.lus[rt - 1].solve(-inc, trans="T") if inc.any() else np.zeros_like(inc)
    for loc in range(rt - 1, 0, -1):
        h[loc] = fac.lus[loc - 1].solve(-(fac.d0[loc].T @ h[loc + 1]), trans="T") \
            if h[loc + 1].any() else np.zeros_like(inc)
    if fac.naux:
        # lambda-equations: -sum_k c_k . z_k = targets; z = h + (response) y
        gh = np.zeros((fac.naux, ncols))
        for loc in range(rt):
            gh += fac.cvecs[loc] @ h[loc + 1]
        y = dla.lu_solve(fac.schur, -(targets + gh), trans=1)
    else:
        y = np.zeros((0, ncols))
    # final backward march with y plugged in
    z = fac.lus[rt - 1].solve(-inc - fac.cvecs[rt - 1].T @ y, trans="T")
    z_levels = [None] * (rt + 1)
    z_levels[rt] = z
    for loc in range(rt - 1, 0, -1):
        rhs = -(fac.d0[loc].T @ z_levels[loc + 1])
        rhs -= fac.cvecs[loc - 1].T @ y + fac.cvecs[loc].T @ y
        z_levels[loc] = fac.lus[loc - 1].solve(rhs, trans="T")
    # coupling for the previous slab's top-level equation
    inc_prev = fac.d0[0].T @ z_levels[1] + fac.cvecs[0].T @ y
    return y, z_levels[1], inc_prev


# --------------------------------------------------------------------------
# materialized basis sets
# --------------------------------------------------------------------------

class LocalBasisSet:
    """Materialized basis columns of one oversampled region.

    ``levels`` has shape (n_window_levels + 1, n_interior, n_columns); level 0
    is the window start (identically zero). ``multipliers`` has shape
    (n_aux, n_columns), rows ordered like ``aux_ids``.
    """

    def __init__(self, grid, region, aux_ids, levels, multipliers, residual):
        self.grid = grid
        self.region = region
        self.aux_ids = aux_ids
        self.levels = levels
        self.multipliers = multipliers
        self.constraint_residual = residual
        self.nodes = RegionNodes(grid, region)

    @property
    def n_columns(self):
        return self.levels.shape[2]

    def column_field(self, c: int) -> np.ndarray:
        """Column c as nodal values (n_levels+1, nny, nnx) on the region grid."""
        nny, nnx = self.nodes.nny, self.nodes.nnx
        out = np.zeros((self.levels.shape[0], nny * nnx))
        out[:, self.nodes.interior_ids] = self.levels[:, :, c]
        return out.reshape(-1, nny, nnx)


def _window_columns_march(engine: Engine, region: Region, check=True):
    ids, _ = engine.aux.region_dofs(region)
    E = np.eye(ids.size)
    out = engine.forward_window(region, E, collect="all", check_residual=check)
    rt = engine.grid.rt
    nin = next(iter(out["levels"].values())).shape[1]
    nlev = region.nslabs * rt
    levels = np.zeros((nlev + 1, nin, ids.size))
    for s in region.slabs():
        base = (s - region.s0) * rt
        levels[base + 1:base + rt + 1] = out["levels"][s]
    lams = np.vstack([out["multipliers"][s] for s in region.slabs()])
    return ids, levels, lams, out["residual"]


def _window_columns_monolithic(engine: Engine, region: Region):
    """Assembled saddle-system solve of the same window problem (oracle path)."""
    grid, field, pou, aux = engine.grid, engine.field, engine.pou, engine.aux
    ids, slab_conts = aux.region_dofs(region)
    conts = [c for s in region.slabs() for c in slab_conts[s]]
    measures = [c.weighted_measure for c in conts]
    trial = FineSpace(grid, region, "conforming")
    test = FineSpace(grid, region, "causal")
    D = assemble_d(pou, field, test, trial)
    S_test = assemble_s_aux(pou, field, test, conts, measures)
    S_trial = assemble_s_aux(pou, field, trial, conts, measures)
    K = sp.bmat([[D, -S_test], [S_trial.T, None]], format="csc")
    F = linsolve.factorize(K)
    rhs = np.zeros((K.shape[0], ids.size))
    rhs[trial.ndof:, :] = np.eye(ids.size)
    X = linsolve.solve_many(F, rhs)
    nin = trial.nodes.n_interior
    nlev = region.nslabs * grid.rt
    levels = np.zeros((nlev + 1, nin, ids.size))
    for p in range(nlev):
        levels[p + 1] = X[p * nin:(p + 1) * nin]
    lams = X[trial.ndof:]
    res = float(np.abs(S_trial.T @ X[:trial.ndof] - np.eye(ids.size)).max())
    return ids, levels, lams, res


def solve_local(engine: Engine, block, lx: int, m: int,
                method: str = "march") -> LocalBasisSet:
    """Materialize every basis column of one block's oversampled region."""
    n, i = block
    region = block_region(engine.grid, n, i, lx, m)
    if method == "march":
        ids, levels, lams, res = _window_columns_march(engine, region)
    elif method == "monolithic":
        ids, levels, lams, res = _window_columns_monolithic(engine, region)
    else:
        raise ValueError(f"unknown method {method!r}")
    return LocalBasisSet(engine.grid, region, ids, levels, lams, res)


def solve_global(engine: Engine, method: str = "march",
                 max_entries: int = 200_000_000) -> LocalBasisSet:
    """Materialize the global downscale columns on (0, T] x Omega.

    Refuses when levels x nodes x columns exceeds ``max_entries`` (the
    materialized field storage), since the global operator is only used as an
    oracle and for the temporal-decay study.
    """
    grid = engine.grid
    region = full_region(grid)
    n_cols = engine.aux.n_dofs
    trial_entries = (region.nslabs * grid.rt + 1)
    nnx, nny = region.fine_node_shape(grid)
    need = trial_entries * nnx * nny * n_cols
    if need > max_entries:
        raise MemoryError(
            f"global basis would hold ~{need:.2e} values; above the limit "
            f"{max_entries:.2e}. Raise max_entries explicitly to override.")
    if method == "march":
        ids, levels, lams, res = _window_columns_march(engine, region)
    elif method == "monolithic":
        ids, levels, lams, res = _window_columns_monolithic(engine, region)
    else:
        raise ValueError(f"unknown method {method!r}")
    return LocalBasisSet(grid, region, ids, levels, lams, res)


# --------------------------------------------------------------------------
# coarse system
# --------------------------------------------------------------------------

@dataclass
class CoarseSystem:
    """Non-local coarse operator over auxiliary dofs, block lower-triangular in time."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    slab_start: list
    bandwidth: int

    @property
    def n(self):
        return self.matrix.shape[0]

    def slab_of(self, dof: int) -> int:
        return int(np.searchsorted(np.asarray(self.slab_start), dof, side="right") - 1)

    def structure_violations(self) -> tuple[int, int]:
        """(anti-causal entries, beyond-bandwidth entries) among stored nonzeros."""
        coo = self.matrix.tocoo()
        starts = np.asarray(self.slab_start)
        row_slab = np.searchsorted(starts, coo.row, side="right") - 1
        col_slab = np.searchsorted(starts, coo.col, side="right") - 1
        nz = coo.data != 0.0
        anti = int(np.count_nonzero((col_slab > row_slab) & nz))
        far = int(np.count_nonzero((row_slab - col_slab > self.bandwidth) & nz))
        return anti, far


def aux_rhs(f, grid: SpaceTimeGrid, aux: AuxiliaryBasis) -> np.ndarray:
    """Load vector b_j = integral of f times psi_j, by the shared quadrature."""
    fs = grid.fine_space
    dt = grid.fine_time.dt
    wcell = fs.hx * fs.hy / 4.0
    out = np.zeros(aux.n_dofs)
    for (n, i), conts in aux.continua.items():
        if not conts:
            continue
        cx, cy = grid.coarse_space.cell_coords(i)
        region = Region(cx, cx, cy, cy, n, n)
        X, Y = gauss_points_xy(grid, region)
        cell_int = []
        for k in region.slab_intervals(grid, n):
            tg = (k - 1 + GAUSS_PTS) * dt
            fv = 0.5 * (f(X, Y, tg[0]) + f(X, Y, tg[1]))
            cell_int.append(fv.sum(axis=2) * wcell * dt)
        cell_int = np.stack(cell_int)
        off = aux.offset[(n, i)]
        for j, cont in enumerate(conts):
            out[off + j] = cell_int[cont.cells].sum() / cont.weighted_measure
    return out


def assemble_coarse(engine: Engine, f, lx: int, m: int, threads: int = 1) -> CoarseSystem:
    """Assemble the non-local coarse matrix from the localized multiplier rows."""
    aux, grid = engine.aux, engine.grid
    blocks = _block_order(grid)
    results = _map_blocks(engine, blocks, "rows", (lx, m), threads)
    rows_idx, cols_idx, vals = [], [], []
    measures = aux.measures()
    for (n, i), (ids, rows) in zip(blocks, results):
        own = aux.block_dofs(n, i)
        for j, dof in enumerate(own):
            rows_idx.append(np.full(ids.size, dof))
            cols_idx.append(ids)
            vals.append(rows[j] / measures[dof])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows_idx), np.concatenate(cols_idx))),
        shape=(aux.n_dofs, aux.n_dofs)).tocsr()
    rhs = aux_rhs(f, grid, aux)
    return CoarseSystem(mat, rhs, list(aux.slab_start), m)


def solve_coarse(cs: CoarseSystem, method: str = "march") -> np.ndarray:
    """Solve the coarse system, marching slab by slab (or monolithic for checks)."""
    if method == "monolithic":
        return linsolve.solve_many(linsolve.factorize(cs.matrix.tocsc()), cs.rhs)
    if method != "march":
        raise ValueError(f"unknown method {method!r}")
    U = np.zeros(cs.n)
    starts = cs.slab_start
    for r in range(len(starts) - 1):
        rows = slice(starts[r], starts[r + 1])
        if rows.stop == rows.start:
            continue
        block = cs.matrix[rows, rows.start:rows.stop].toarray()
        rhs = cs.rhs[rows] - cs.matrix[rows, :rows.start] @ U[:rows.start]
        try:
            U[rows] = dla.solve(block, rhs)
        except dla.LinAlgError as exc:
            raise linsolve.SingularMatrixError(
                f"singular coarse block at slab {r}: {exc}") from exc
    return U


# --------------------------------------------------------------------------
# downscale
# --------------------------------------------------------------------------

def node_share_weights(grid: SpaceTimeGrid) -> np.ndarray:
    """1 / (number of coarse cells whose closure contains each fine node)."""
    fs = grid.fine_space
    jx = np.arange(fs.nx + 1)
    jy = np.arange(fs.ny + 1)
    mx = np.where((jx % grid.rx == 0) & (jx > 0) & (jx < fs.nx), 2, 1)
    my = np.where((jy % grid.ry == 0) & (jy > 0) & (jy < fs.ny), 2, 1)
    return 1.0 / (my[:, None] * mx[None, :]).astype(float).ravel()


def downscale(engine: Engine, U: np.ndarray, lx: int, m: int,
              threads: int = 1):
    """Assemble the fine multiscale field u_ms from the coarse solution U.

    Each block's localized solve is combined with its window's entries of U
    and pasted onto the block's own cell (slab-indicator in time; fine nodes
    shared between coarse cells are averaged). Returns (u_ms, max constraint
    residual) with u_ms of shape (nt_fine + 1, n_nodes).
    """
    grid = engine.grid
    fs = grid.fine_space
    nnodes = (fs.nx + 1) * (fs.ny + 1)
    u = np.zeros((grid.fine_time.nt + 1, nnodes))
    weights = node_share_weights(grid)
    blocks = _block_order(grid)
    results = _map_blocks(engine, blocks, "downscale", (lx, m, U), threads)
    res_max = 0.0
    order = np.lexsort(([i for (_, i) in blocks], [n for (n, _) in blocks]))
    for pos in order:
        n, i = blocks[pos]
        gids, levels, res = results[pos]
        res_max = max(res_max, res)
        base = n * grid.rt
        u[base + 1:base + grid.rt + 1, gids] += levels * weights[gids][None, :]
    return u, res_max


def _block_cell_values(engine: Engine, n: int, i: int, lx: int, m: int, U: np.ndarray):
    """Combined local solve of one block, restricted to its own cell closure."""
    grid = engine.grid
    region = block_region(grid, n, i, lx, m)
    ids, _ = engine.aux.region_dofs(region)
    out = engine.forward_window(region, U[ids][:, None], collect="last_slab",
                                check_residual=True)
    levels = out["levels"][n][:, :, 0]  # (rt, n_interior)
    nodes = RegionNodes(grid, region)
    cx, cy = grid.coarse_space.cell_coords(i)
    fx0, _, fy0, _ = region.fine_cell_ranges(grid)
    jx = np.arange(cx * grid.rx, (cx + 1) * grid.rx + 1)
    jy = np.arange(cy * grid.ry, (cy + 1) * grid.ry + 1)
    loc = ((jy - fy0)[:, None] * nodes.nnx + (jx - fx0)[None, :]).ravel()
    inman = nodes.to_interior[loc]
    vals = np.zeros((grid.rt, loc.size))
    have = inman >= 0
    vals[:, have] = levels[:, inman[have]]
    gids = (jy[:, None] * (grid.fine_space.nx + 1) + jx[None, :]).ravel()
    scale = max(1.0, float(np.abs(U[ids]).max()) if ids.size else 1.0)
    return gids, vals, out["residual"] / scale


# --------------------------------------------------------------------------
# block iteration and parallel dispatch
# --------------------------------------------------------------------------

def _block_order(grid: SpaceTimeGrid):
    """Blocks grouped by spatial cell (cache-friendly: windows share slabs)."""
    return [(n, i) for i in range(grid.coarse_space.cell_count)
            for n in range(grid.coarse_time.nt)]


_WORKER_ENGINE: Engine | None = None
_WORKER_TASK = None


def _worker_init(engine, task, args):
    global _WORKER_ENGINE, _WORKER_TASK
    _WORKER_ENGINE = engine
    _WORKER_TASK = (task, args)


def _worker_run(block):
    task, args = _WORKER_TASK
    n, i = block
    if task == "rows":
        lx, m = args
        region = block_region(_WORKER_ENGINE.grid, n, i, lx, m)
        return _WORKER_ENGINE.coarse_rows(n, i, region)
    lx, m, U = args
    return _block_cell_values(_WORKER_ENGINE, n, i, lx, m, U)


def _map_blocks(engine: Engine, blocks, task, args, threads: int):
    if threads <= 1:
        _worker_init(engine, task, args)
        return [_worker_run(b) for b in blocks]
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    try:
        ctx = mp.get_context("fork")
    except ValueError:
        log.warning("fork start method unavailable; running sequentially")
        _worker_init(engine, task, args)
        return [_worker_run(b) for b in blocks]
    _worker_init(engine, task, args)
    chunk = max(1, len(blocks) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
        return list(pool.map(_worker_run, blocks, chunksize=chunk))


# --------------------------------------------------------------------------
# decay diagnostics
# --------------------------------------------------------------------------

def decay_profile(basis: LocalBasisSet, engine: Engine, column: int,
                  mode: str = "space", center=None):
    """Per-layer V-norm energies of one materialized basis column.

    ``mode="space"``: layers are the rings K_l minus K_{l-1} of coarse cells
    around ``center`` (the column's own cell by default), energies over the
    whole window. ``mode="time"``: layers are coarse slabs at increasing
    distance from the column's birth slab (the slab of its constraint).
    """
    from . import metrics

    grid, region = engine.grid, basis.region
    field_vals = basis.column_field(column)
    dof = int(basis.aux_ids[column])
    birth = engine.aux.slab_of_dof(dof)
    if mode == "time":
        energies = []
        for s in range(birth, region.s1 + 1):
            e = metrics.region_energy(grid, engine.field, engine.pou, field_vals,
                                      region, kind="V", slabs=(s, s))
            energies.append(e)
        return np.array(energies)
    if mode != "space":
        raise ValueError(f"unknown mode {mode!r}")
    if center is None:
        blk = None
        for (bn, bi), conts in engine.aux.continua.items():
            off = engine.aux.offset[(bn, bi)]
            if off <= dof < off + len(conts):
                blk = (bn, bi)
                break
        center = blk[1]
    ccx, ccy = grid.coarse_space.cell_coords(center)
    energies = []
    prev = None
    layer = 0
    while True:
        ix0 = max(ccx - layer, region.ix0)
        ix1 = min(ccx + layer, region.ix1)
        iy0 = max(ccy - layer, region.iy0)
        iy1 = min(ccy + layer, region.iy1)
        mask = np.zeros((region.ncy * grid.ry, region.ncx * grid.rx), dtype=bool)
        fx0 = (ix0 - region.ix0) * grid.rx
        fx1 = (ix1 - region.ix0 + 1) * grid.rx
        fy0 = (iy0 - region.iy0) * grid.ry
        fy1 = (iy1 - region.iy0 + 1) * grid.ry
        mask[fy0:fy1, fx0:fx1] = True
        if prev is not None:
            ring = mask & ~prev
        else:
            ring = mask
        energies.append(metrics.region_energy(grid, engine.field, engine.pou,
                                              field_vals, region, kind="V",
                                              cells_mask=ring))
        if (ix0 == region.ix0 and ix1 == region.ix1
                and iy0 == region.iy0 and iy1 == region.iy1):
            break
        prev = mask
        layer += 1
    return np.array(energies)


def fit_decay(energies: np.ndarray, skip: int = 1):
    """Least-squares log-linear fit beyond the first ``skip`` layers.

    Returns (slope, r_squared) of log(E_k) against k; zero energies are
    clipped at 1e-300 to keep the fit defined.
    """
    e = np.maximum(np.asarray(energies, dtype=float)[skip:], 1e-300)
    k = np.arange(e.size, dtype=float)
    logs = np.log(e)
    A = np.column_stack([k, np.ones_like(k)])
    coef, *_ = np.linalg.lstsq(A, logs, rcond=None)
    fitted = A @ coef
    ss_res = float(np.sum((logs - fitted) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2
