"""Structured tensor-product space-time meshes.

The solver works on a pair of nested tensor grids: a coarse grid whose
cells carry the macroscopic degrees of freedom, and a fine grid obtained
by integer refinement, on which everything is actually discretized.
Space cells are closed rectangles; time slabs are half-open intervals
``(t_n, t_{n+1}]`` so that every fine time level beyond t=0 belongs to
exactly one slab.

Conventions used throughout the package:

* spatial node flat index  ``p = jy * (nx + 1) + jx``
* spatial cell flat index  ``c = cy * nx + cx``
* coarse space-time block  ``(n, i)`` = (slab index, coarse cell index)
* degree-of-freedom order is space-major within a time level, with time
  levels ascending.

Oversampling of a coarse cell grows by *vertex* adjacency (corner contact
counts), so each layer adds a full ring of cells and regions stay
rectangular; growth is clipped at the domain boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform rectangular grid over an axis-aligned domain."""

    nx: int
    ny: int
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"cell counts must be >= 1, got {self.nx} x {self.ny}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("domain must have positive extent")

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def cell_count(self) -> int:
        return self.nx * self.ny

    @property
    def node_count(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def cell_index(self, cx: int, cy: int) -> int:
        return cy * self.nx + cx

    def cell_coords(self, i: int) -> tuple[int, int]:
        return i % self.nx, i // self.nx

    def node_index(self, jx: int, jy: int) -> int:
        return jy * (self.nx + 1) + jx


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of (0, T] into nt slabs."""

    nt: int
    T: float = 1.0

    def __post_init__(self):
        if self.nt < 1:
            raise ValueError(f"slab count must be >= 1, got {self.nt}")
        if not self.T > 0:
            raise ValueError("terminal time must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    def boundary(self, n: int) -> float:
        return n * self.dt


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Coarse tensor grid plus its integer fine refinement."""

    coarse_space: SpaceGrid
    coarse_time: TimeGrid
    rx: int
    ry: int
    rt: int
    fine_space: SpaceGrid = field(init=False)
    fine_time: TimeGrid = field(init=False)

    def __post_init__(self):
        if self.rx < 1 or self.ry < 1 or self.rt < 1:
            raise ValueError("refinement ratios must be >= 1")
        cs, ct = self.coarse_space, self.coarse_time
        object.__setattr__(
            self, "fine_space",
            SpaceGrid(cs.nx * self.rx, cs.ny * self.ry, cs.x0, cs.x1, cs.y0, cs.y1))
        object.__setattr__(self, "fine_time", TimeGrid(ct.nt * self.rt, ct.T))

    @property
    def block_count(self) -> int:
        return self.coarse_time.nt * self.coarse_space.cell_count

    def block_of_fine_cell(self, cx: int, cy: int, k: int) -> tuple[int, int]:
        """Coarse block (n, i) containing fine space cell (cx, cy) at fine interval k.

        Fine intervals are indexed 1..nt_fine by their right endpoint, matching
        the half-open slab convention.
        """
        n = (k - 1) // self.rt
        i = self.coarse_space.cell_index(cx // self.rx, cy // self.ry)
        return n, i


def build_grid(nxc, nyc, ntc, rx, ry, rt, domain=(0.0, 1.0, 0.0, 1.0), T=1.0) -> SpaceTimeGrid:
    """Build the nested coarse/fine space-time grid.

    ``domain`` is (x0, x1, y0, y1). All counts and ratios must be positive
    integers; cell sizes are always derived, never stored.
    """
    x0, x1, y0, y1 = domain
    coarse_space = SpaceGrid(nxc, nyc, x0, x1, y0, y1)
    coarse_time = TimeGrid(ntc, T)
    return SpaceTimeGrid(coarse_space, coarse_time, rx, ry, rt)


def oversample_ranges(grid: SpaceTimeGrid, i: int, lx: int) -> tuple[int, int, int, int]:
    """Inclusive coarse-cell index ranges (ix0, ix1, iy0, iy1) of K^i enlarged by lx layers."""
    if lx < 0:
        raise ValueError("layer count must be >= 0")
    cs = grid.coarse_space
    cx, cy = cs.cell_coords(i)
    return (max(cx - lx, 0), min(cx + lx, cs.nx - 1),
            max(cy - lx, 0), min(cy + lx, cs.ny - 1))


def oversample_space(grid: SpaceTimeGrid, i: int, lx: int) -> frozenset[int]:
    """Coarse cells within lx vertex-adjacency layers of cell i, clipped at the boundary."""
    ix0, ix1, iy0, iy1 = oversample_ranges(grid, i, lx)
    cs = grid.coarse_space
    return frozenset(cs.cell_index(cx, cy)
                     for cy in range(iy0, iy1 + 1)
                     for cx in range(ix0, ix1 + 1))


def oversample_time(grid: SpaceTimeGrid, n: int, m: int) -> range:
    """Slabs max(n-m, 0)..n, i.e. the window (t_{max(n-m,0)}, t_{n+1}]."""
    if not 0 <= n < grid.coarse_time.nt:
        raise ValueError(f"slab index {n} out of range")
    if m < 0:
        raise ValueError("temporal layer count must be >= 0")
    return range(max(n - m, 0), n + 1)


@dataclass(frozen=True)
class Region:
    """An oversampled space-time region: a rectangle of coarse cells times a slab range.

    ``ix0..ix1`` and ``iy0..iy1`` are inclusive coarse-cell ranges; ``s0..s1``
    are inclusive slab indices, so the time window is (t_s0, t_{s1+1}].
    """

    ix0: int
    ix1: int
    iy0: int
    iy1: int
    s0: int
    s1: int

    def __post_init__(self):
        if self.ix1 < self.ix0 or self.iy1 < self.iy0 or self.s1 < self.s0:
            raise ValueError("region must be non-empty")

    @property
    def ncx(self) -> int:
        return self.ix1 - self.ix0 + 1

    @property
    def ncy(self) -> int:
        return self.iy1 - self.iy0 + 1

    @property
    def nslabs(self) -> int:
        return self.s1 - self.s0 + 1

    def space_cells(self, grid: SpaceTimeGrid) -> frozenset[int]:
        cs = grid.coarse_space
        return frozenset(cs.cell_index(cx, cy)
                         for cy in range(self.iy0, self.iy1 + 1)
                         for cx in range(self.ix0, self.ix1 + 1))

    def slabs(self) -> range:
        return range(self.s0, self.s1 + 1)

    def contains_block(self, grid: SpaceTimeGrid, n: int, i: int) -> bool:
        cx, cy = grid.coarse_space.cell_coords(i)
        return (self.s0 <= n <= self.s1 and self.ix0 <= cx <= self.ix1
                and self.iy0 <= cy <= self.iy1)

    # --- fine-grid footprint -------------------------------------------------

    def fine_cell_ranges(self, grid: SpaceTimeGrid) -> tuple[int, int, int, int]:
        """Half-open fine-cell ranges (fx0, fx1, fy0, fy1) covered by the region."""
        return (self.ix0 * grid.rx, (self.ix1 + 1) * grid.rx,
                self.iy0 * grid.ry, (self.iy1 + 1) * grid.ry)

    def fine_node_shape(self, grid: SpaceTimeGrid) -> tuple[int, int]:
        """(n_nodes_x, n_nodes_y) of the region's fine sub-grid."""
        fx0, fx1, fy0, fy1 = self.fine_cell_ranges(grid)
        return fx1 - fx0 + 1, fy1 - fy0 + 1

    def fine_levels(self, grid: SpaceTimeGrid) -> range:
        """Fine time levels in the window, excluding the window start level."""
        return range(self.s0 * grid.rt + 1, (self.s1 + 1) * grid.rt + 1)

    def fine_intervals(self, grid: SpaceTimeGrid) -> range:
        """Fine intervals (indexed by right endpoint level) inside the window."""
        return self.fine_levels(grid)

    def slab_intervals(self, grid: SpaceTimeGrid, s: int) -> range:
        if not self.s0 <= s <= self.s1:
            raise ValueError(f"slab {s} outside region window")
        return range(s * grid.rt + 1, (s + 1) * grid.rt + 1)


def block_region(grid: SpaceTimeGrid, n: int, i: int, lx: int, m: int) -> Region:
    """Oversampled region of block (n, i): lx spatial layers, m backward slabs."""
    ix0, ix1, iy0, iy1 = oversample_ranges(grid, i, lx)
    slabs = oversample_time(grid, n, m)
    return Region(ix0, ix1, iy0, iy1, slabs.start, n)


def full_region(grid: SpaceTimeGrid) -> Region:
    """The whole space-time domain as a region."""
    cs, ct = grid.coarse_space, grid.coarse_time
    return Region(0, cs.nx - 1, 0, cs.ny - 1, 0, ct.nt - 1)
