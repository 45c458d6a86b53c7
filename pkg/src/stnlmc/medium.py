"""Permeability fields, channel continua, partitions of unity and the weight kappa-tilde.

A permeability field is a background matrix value plus an ordered list of
channels; each channel is a union of axis-aligned space-time boxes carrying
one value. Membership of a fine space-time cell is decided at its midpoint
(the experiment geometries are grid-aligned, so this is exact), and the last
channel containing the midpoint wins.

Within one coarse block, the channel cells split into continua by face
adjacency in (x, y, t); the non-channel remainder forms the matrix continuum.
A moving channel that shifts by one fine cell per fine step stays a single
continuum through the time adjacency.

The weight ``kappa_tilde = sum_j kappa |grad chi_j|^2`` is built from a
partition of unity: either the bilinear nodal hats of the coarse grid
(default) or cell-local harmonic extensions of the same boundary data
("multiscale" mode), recomputed with kappa frozen per fine time interval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import splu

from .grid import Region, SpaceTimeGrid

log = logging.getLogger(__name__)

# 2-point Gauss rule on [0, 1], used for every spatial axis
GAUSS_PTS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
GAUSS_WTS = np.array([0.5, 0.5])


@dataclass(frozen=True)
class Box:
    """Axis-aligned space-time box (x0, x1) x (y0, y1) x (t0, t1)."""

    x0: float
    x1: float
    y0: float
    y1: float
    t0: float
    t1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0 and self.t1 > self.t0):
            raise ValueError(f"box must have positive extent in every axis: {self}")

    def contains(self, x, y, t):
        return (self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1
                and self.t0 <= t <= self.t1)


@dataclass(frozen=True)
class Channel:
    """One channel: a union of boxes sharing a single permeability value."""

    boxes: tuple[Box, ...]
    value: float


class PermeabilityField:
    """Piecewise-constant space-time permeability: matrix plus channels."""

    def __init__(self, kappa_matrix: float, channels=()):
        if kappa_matrix <= 0:
            raise ValueError("matrix permeability must be positive")
        for ch in channels:
            if ch.value <= 0:
                raise ValueError("channel permeability must be positive")
        self.kappa_matrix = float(kappa_matrix)
        self.channels = tuple(channels)
        values = [kappa_matrix] + [ch.value for ch in channels]
        self.kappa_min = min(values)
        self.kappa_max = max(values)

    def value_at(self, x: float, y: float, t: float) -> float:
        """Value at a space-time point; the last matching channel wins."""
        value = self.kappa_matrix
        for ch in self.channels:
            if any(b.contains(x, y, t) for b in ch.boxes):
                value = ch.value
        return value

    def kappa_cells(self, grid: SpaceTimeGrid, region: Region, k: int) -> np.ndarray:
        """(ncy, ncx) array of kappa over the region's fine cells, interval k.

        Values are taken at cell midpoints with t at the interval midpoint.
        """
        fs = grid.fine_space
        fx0, fx1, fy0, fy1 = region.fine_cell_ranges(grid)
        xm = fs.x0 + (np.arange(fx0, fx1) + 0.5) * fs.hx
        ym = fs.y0 + (np.arange(fy0, fy1) + 0.5) * fs.hy
        tm = (k - 0.5) * grid.fine_time.dt
        out = np.full((fy1 - fy0, fx1 - fx0), self.kappa_matrix)
        for ch in self.channels:
            hit = np.zeros_like(out, dtype=bool)
            for b in ch.boxes:
                if not (b.t0 <= tm <= b.t1):
                    continue
                mx = (xm >= b.x0) & (xm <= b.x1)
                my = (ym >= b.y0) & (ym <= b.y1)
                hit |= my[:, None] & mx[None, :]
            out[hit] = ch.value
        return out

    def channel_mask_cells(self, grid: SpaceTimeGrid, region: Region, k: int) -> np.ndarray:
        """Boolean (ncy, ncx) mask of fine cells with kappa above the matrix value."""
        return self.kappa_cells(grid, region, k) > self.kappa_matrix

    def fingerprint(self, grid: SpaceTimeGrid, region: Region, intervals) -> bytes:
        """Hashable snapshot of kappa over region x intervals (cache key component)."""
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        for k in intervals:
            h.update(self.kappa_cells(grid, region, k).tobytes())
        return h.digest()


def kappa_at(field: PermeabilityField, grid: SpaceTimeGrid, cell) -> float:
    """Permeability of the fine space-time cell ``(cx, cy, k)`` at its midpoint."""
    cx, cy, k = cell
    fs = grid.fine_space
    x = fs.x0 + (cx + 0.5) * fs.hx
    y = fs.y0 + (cy + 0.5) * fs.hy
    t = (k - 0.5) * grid.fine_time.dt
    return field.value_at(x, y, t)


@dataclass(eq=False)
class Continuum:
    """One connected channel component (or the matrix remainder) of a coarse block.

    ``cells`` is a boolean array of shape (rt, ry, rx) over the block's fine
    space-time cells, ordered (local interval, local cell y, local cell x).
    The kappa-tilde-weighted measure is attached by the auxiliary-basis builder.
    """

    block: tuple[int, int]
    kind: str  # "channel" | "matrix"
    cells: np.ndarray
    weighted_measure: float = 0.0


def extract_continua(field: PermeabilityField, grid: SpaceTimeGrid, block) -> list[Continuum]:
    """Split a coarse block into channel continua plus the matrix remainder.

    Channel continua are the connected components (face adjacency in x, y, t)
    of the block's fine cells whose kappa exceeds the matrix value.
    """
    n, i = block
    cs = grid.coarse_space
    cx, cy = cs.cell_coords(i)
    region = Region(cx, cx, cy, cy, n, n)
    mask = np.stack([field.channel_mask_cells(grid, region, k)
                     for k in region.slab_intervals(grid, n)])
    structure = ndimage.generate_binary_structure(3, 1)
    labels, ncomp = ndimage.label(mask, structure=structure)
    out = [Continuum((n, i), "channel", labels == c) for c in range(1, ncomp + 1)]
    matrix_cells = ~mask
    if matrix_cells.any():
        out.append(Continuum((n, i), "matrix", matrix_cells))
    else:
        log.warning("block (n=%d, i=%d) fully covered by channels; no matrix continuum", n, i)
    return out


def _bilinear_grad_sq_1d(xi: np.ndarray) -> np.ndarray:
    # sum over the two 1D hats of the squared shape value, 2((1-xi)^2 + xi^2)
    return 2.0 * ((1.0 - xi) ** 2 + xi ** 2)


class PartitionOfUnity:
    """Coarse-node partition of unity chi_j with gradient-sum evaluation.

    ``mode="bilinear"`` uses the tensor-product hats of the coarse grid.
    ``mode="multiscale"`` solves, per coarse cell and per fine time interval
    (or per slab with ``freeze="slab"``), the cell problem
    -div(kappa grad chi) = 0 with the same affine boundary data, on the
    cell's fine sub-mesh.
    """

    def __init__(self, grid: SpaceTimeGrid, field_: PermeabilityField | None = None,
                 mode: str = "bilinear", freeze: str = "interval"):
        if mode not in ("bilinear", "multiscale"):
            raise ValueError(f"unknown partition-of-unity mode {mode!r}")
        if freeze not in ("interval", "slab"):
            raise ValueError(f"unknown freeze policy {freeze!r}")
        if mode == "multiscale" and field_ is None:
            raise ValueError("multiscale mode needs the permeability field")
        self.grid = grid
        self.field = field_
        self.mode = mode
        self.freeze = freeze
        self._cell_solutions: dict = {}

    # --- evaluation ----------------------------------------------------------

    def chi_at(self, j: int, x: float, y: float, k: int = 1):
        """(chi_j, grad chi_j) at a point, kappa frozen on fine interval k."""
        cs = self.grid.coarse_space
        jx, jy = j % (cs.nx + 1), j // (cs.nx + 1)
        cx = min(int((x - cs.x0) / cs.hx), cs.nx - 1)
        cy = min(int((y - cs.y0) / cs.hy), cs.ny - 1)
        if not (jx in (cx, cx + 1) and jy in (cy, cy + 1)):
            return 0.0, np.zeros(2)
        xi = (x - cs.x0) / cs.hx - cx
        eta = (y - cs.y0) / cs.hy - cy
        if self.mode == "bilinear":
            fx, dfx = (xi, 1.0) if jx == cx + 1 else (1.0 - xi, -1.0)
            fy, dfy = (eta, 1.0) if jy == cy + 1 else (1.0 - eta, -1.0)
            return fx * fy, np.array([dfx * fy / cs.hx, fx * dfy / cs.hy])
        corner = (1 if jx == cx + 1 else 0) + 2 * (1 if jy == cy + 1 else 0)
        nodal = self._multiscale_cell(cs.cell_index(cx, cy), k)[corner]
        return _q1_eval(nodal, xi, eta, self.grid.rx, self.grid.ry, cs.hx, cs.hy)

    def grad_sq_gauss(self, region: Region, k: int) -> np.ndarray:
        """sum_j |grad chi_j|^2 at the 2x2 Gauss points of the region's fine cells.

        Returns an array of shape (ncy, ncx, 4); Gauss points ordered
        (gy, gx) row-major.
        """
        grid = self.grid
        if self.mode == "bilinear":
            return self._bilinear_grad_sq(region)
        fx0, fx1, fy0, fy1 = region.fine_cell_ranges(grid)
        out = np.empty((fy1 - fy0, fx1 - fx0, 4))
        cs = grid.coarse_space
        for icy in range(region.iy0, region.iy1 + 1):
            for icx in range(region.ix0, region.ix1 + 1):
                cell = cs.cell_index(icx, icy)
                sol = self._multiscale_cell(cell, k)
                gsq = _grad_sq_cellwise(sol, grid.rx, grid.ry, cs.hx, cs.hy)
                out[icy * grid.ry - fy0:(icy + 1) * grid.ry - fy0,
                    icx * grid.rx - fx0:(icx + 1) * grid.rx - fx0] = gsq
        return out

    def _bilinear_grad_sq(self, region: Region) -> np.ndarray:
        grid = self.grid
        cs = grid.coarse_space
        fx0, fx1, fy0, fy1 = region.fine_cell_ranges(grid)
        # local coordinates within the owning coarse cell at spatial Gauss points
        ix = np.arange(fx0, fx1)
        iy = np.arange(fy0, fy1)
        xi = ((ix % grid.rx)[:, None] + GAUSS_PTS[None, :]) / grid.rx    # (ncx, 2)
        eta = ((iy % grid.ry)[:, None] + GAUSS_PTS[None, :]) / grid.ry   # (ncy, 2)
        sum_x = _bilinear_grad_sq_1d(eta) / cs.hx ** 2   # d/dx part varies with eta
        sum_y = _bilinear_grad_sq_1d(xi) / cs.hy ** 2    # d/dy part varies with xi
        ncy, ncx = fy1 - fy0, fx1 - fx0
        out = sum_x[:, None, :, None] + sum_y[None, :, None, :]
        return out.reshape(ncy, ncx, 4)

    # --- multiscale cell solves ----------------------------------------------

    def _multiscale_cell(self, cell: int, k: int):
        grid = self.grid
        if self.freeze == "slab":
            k = ((k - 1) // grid.rt) * grid.rt + 1
        cs = grid.coarse_space
        cx, cy = cs.cell_coords(cell)
        region = Region(cx, cx, cy, cy, 0, 0)
        kap = self.field.kappa_cells(grid, region, k)
        key = (cell, kap.tobytes())
        if key not in self._cell_solutions:
            self._cell_solutions[key] = _harmonic_extension(kap, grid.rx, grid.ry,
                                                            cs.hx, cs.hy, cell)
        return self._cell_solutions[key]


def _q1_shape_grads(rx, ry, hx_cell, hy_cell):
    # reference Q1 gradients at the 4 Gauss points of one fine cell
    g = GAUSS_PTS
    dN = np.empty((4, 4, 2))  # (gauss, node, deriv)
    for gi, (gy, gx) in enumerate([(a, b) for a in g for b in g]):
        dN[gi] = [[-(1 - gy), -(1 - gx)], [(1 - gy), -gx], [-gy, (1 - gx)], [gy, gx]]
    dN[..., 0] /= hx_cell
    dN[..., 1] /= hy_cell
    return dN


def _harmonic_extension(kap: np.ndarray, rx, ry, hx, hy, cell):
    """Solve -div(kappa grad chi)=0 on a coarse cell's fine mesh, 4 corner data sets."""
    from .forms import q1_stiffness_cells

    hxf, hyf = hx / rx, hy / ry
    nnx, nny = rx + 1, ry + 1
    K = q1_stiffness_cells(kap, rx, ry, hxf, hyf)
    xi = np.linspace(0.0, 1.0, nnx)
    eta = np.linspace(0.0, 1.0, nny)
    # affine boundary data of the four corner hats on the cell boundary
    data = [np.outer(1 - eta, 1 - xi), np.outer(1 - eta, xi),
            np.outer(eta, 1 - xi), np.outer(eta, xi)]
    interior = np.ones((nny, nnx), dtype=bool)
    interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
    idx = np.flatnonzero(interior.ravel())
    bnd = np.flatnonzero(~interior.ravel())
    Kii = K[idx][:, idx].tocsc()
    Kib = K[idx][:, bnd]
    try:
        lu = splu(Kii)
    except RuntimeError as exc:
        raise RuntimeError(f"singular local partition-of-unity solve on cell {cell}") from exc
    out = []
    for g in data:
        chi = g.ravel().copy()
        chi[idx] = lu.solve(-Kib @ chi[bnd])
        out.append(chi.reshape(nny, nnx))
    return out


def _q1_eval(nodal: np.ndarray, xi, eta, rx, ry, hx, hy):
    """Value and gradient of a Q1 field on a coarse cell at local coords (xi, eta)."""
    fx = min(int(xi * rx), rx - 1)
    fy = min(int(eta * ry), ry - 1)
    lx = xi * rx - fx
    ly = eta * ry - fy
    v = nodal[fy:fy + 2, fx:fx + 2]
    val = (v[0, 0] * (1 - lx) * (1 - ly) + v[0, 1] * lx * (1 - ly)
           + v[1, 0] * (1 - lx) * ly + v[1, 1] * lx * ly)
    hxf, hyf = hx / rx, hy / ry
    dx = ((v[0, 1] - v[0, 0]) * (1 - ly) + (v[1, 1] - v[1, 0]) * ly) / hxf
    dy = ((v[1, 0] - v[0, 0]) * (1 - lx) + (v[1, 1] - v[0, 1]) * lx) / hyf
    return val, np.array([dx, dy])


def _grad_sq_cellwise(solutions, rx, ry, hx, hy):
    """sum over the 4 nodal solutions of |grad|^2 at Gauss points, per fine cell."""
    hxf, hyf = hx / rx, hy / ry
    dN = _q1_shape_grads(rx, ry, hxf, hyf)  # (4 gauss, 4 node, 2)
    out = np.zeros((ry, rx, 4))
    for sol in solutions:
        corners = np.stack([sol[:-1, :-1], sol[:-1, 1:], sol[1:, :-1], sol[1:, 1:]],
                           axis=-1)  # (ry, rx, 4 nodes)
        grads = np.einsum("yxn,gnd->yxgd", corners, dN)
        out += np.einsum("yxgd,yxgd->yxg", grads, grads)
    return out


def build_pou(field: PermeabilityField, grid: SpaceTimeGrid, mode: str = "bilinear",
              freeze: str = "interval") -> PartitionOfUnity:
    """Build the partition of unity used by the weight kappa-tilde."""
    return PartitionOfUnity(grid, field, mode, freeze)


def tilde_kappa_at(pou: PartitionOfUnity, field: PermeabilityField,
                   x: float, y: float, t: float) -> float:
    """Pointwise kappa * sum_j |grad chi_j|^2 with kappa frozen per fine interval."""
    grid = pou.grid
    dt = grid.fine_time.dt
    k = min(max(int(np.ceil(t / dt)), 1), grid.fine_time.nt)
    cs = grid.coarse_space
    nnx = cs.nx + 1
    cx = min(int((x - cs.x0) / cs.hx), cs.nx - 1)
    cy = min(int((y - cs.y0) / cs.hy), cs.ny - 1)
    total = 0.0
    for jy in (cy, cy + 1):
        for jx in (cx, cx + 1):
            _, g = pou.chi_at(jy * nnx + jx, x, y, k)
            total += g @ g
    return field.value_at(x, y, (k - 0.5) * dt) * total


def tilde_kappa_gauss(pou: PartitionOfUnity, field: PermeabilityField,
                      region: Region, k: int) -> np.ndarray:
    """kappa-tilde at the 2x2 Gauss points of the region's fine cells, interval k.

    Shape (ncy, ncx, 4); this is the evaluation every bilinear form uses.
    """
    kap = field.kappa_cells(pou.grid, region, k)
    return kap[:, :, None] * pou.grad_sq_gauss(region, k)
