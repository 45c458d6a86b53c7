"""Space-time norms, relative errors and decay fits.

All norms use the same quadrature rules as the bilinear forms (2-point Gauss
per axis, kappa constant per fine cell, kappa-tilde pointwise at spatial
Gauss points); the V-norm is the kappa-weighted gradient energy plus the
inverse-kappa-tilde-weighted time-derivative energy, summed per coarse slab.

Fields are nodal arrays over fine time levels: full-domain fields have shape
(nt_fine + 1, n_nodes); region-local fields (nt_window + 1, nny, nnx).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import Region, SpaceTimeGrid, full_region
from .medium import PartitionOfUnity, PermeabilityField, tilde_kappa_gauss
from .forms import q1_mass_cells, q1_stiffness_cells, q1_weighted_mass_cells

KINDS = ("L2", "s", "W", "V")


def _interval_energies(grid, field, pou, region, k, u0, u1, kinds, cells_mask):
    """Squared-energy contributions of one fine interval, one dict per kind."""
    fs = grid.fine_space
    dt = grid.fine_time.dt
    ncx = region.ncx * grid.rx
    ncy = region.ncy * grid.ry
    out = {}
    kap = field.kappa_cells(grid, region, k)
    if cells_mask is not None:
        kap = np.where(cells_mask, kap, 0.0)
    mask_w = None
    if cells_mask is not None:
        mask_w = np.repeat(cells_mask[:, :, None].astype(float), 4, axis=2)
    if "W" in kinds or "V" in kinds:
        A = q1_stiffness_cells(kap, ncx, ncy, fs.hx, fs.hy)
        e = (u0 @ (A @ u0) + u1 @ (A @ u1) + u0 @ (A @ u1)) * dt / 3.0
        out["W"] = e
    if "L2" in kinds:
        if mask_w is None:
            M = q1_mass_cells(ncx, ncy, fs.hx, fs.hy)
        else:
            M = q1_weighted_mass_cells(mask_w, ncx, ncy, fs.hx, fs.hy)
        out["L2"] = (u0 @ (M @ u0) + u1 @ (M @ u1) + u0 @ (M @ u1)) * dt / 3.0
    if "s" in kinds or "V" in kinds:
        tk = tilde_kappa_gauss(pou, field, region, k)
        if "s" in kinds:
            w = tk if mask_w is None else tk * mask_w
            S = q1_weighted_mass_cells(w, ncx, ncy, fs.hx, fs.hy)
            out["s"] = (u0 @ (S @ u0) + u1 @ (S @ u1) + u0 @ (S @ u1)) * dt / 3.0
        if "V" in kinds:
            w = 1.0 / tk if mask_w is None else mask_w / tk
            E = q1_weighted_mass_cells(w, ncx, ncy, fs.hx, fs.hy)
            d = u1 - u0
            out["V"] = out["W"] + (d @ (E @ d)) / dt
    return out


def region_energy(grid: SpaceTimeGrid, field: PermeabilityField, pou: PartitionOfUnity,
                  values: np.ndarray, region: Region, kind: str = "V",
                  cells_mask=None, slabs=None) -> float:
    """Squared norm of a region-local field, optionally over a cell subset / slab range."""
    if kind not in KINDS:
        raise ValueError(f"unknown norm kind {kind!r}; expected one of {KINDS}")
    vals = values.reshape(values.shape[0], -1)
    if slabs is None:
        intervals = region.fine_intervals(grid)
    else:
        lo, hi = slabs
        intervals = range(lo * grid.rt + 1, (hi + 1) * grid.rt + 1)
    base = region.s0 * grid.rt
    total = 0.0
    for k in intervals:
        u0 = vals[k - base - 1]
        u1 = vals[k - base]
        total += _interval_energies(grid, field, pou, region, k, u0, u1,
                                    (kind,), cells_mask)[kind]
    return float(total)


def norm(grid: SpaceTimeGrid, field: PermeabilityField, pou: PartitionOfUnity,
         values: np.ndarray, kind: str = "L2") -> float:
    """Norm of a full-domain fine field (nt_fine + 1, n_nodes)."""
    return float(np.sqrt(region_energy(grid, field, pou, values, full_region(grid), kind)))


@dataclass
class ErrorReport:
    """Relative errors (percent) of one multiscale run plus phase timings."""

    ell_x: int
    ell_t: int
    rel_l2_pct: float
    rel_h1k_pct: float
    timings: dict = dc_field(default_factory=dict)
    decay: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for v in (self.rel_l2_pct, self.rel_h1k_pct):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"relative errors must be finite and >= 0, got {v}")


def relative_errors(grid: SpaceTimeGrid, field: PermeabilityField, pou: PartitionOfUnity,
                    reference: np.ndarray, multiscale: np.ndarray,
                    ell_x: int = 0, ell_t: int = 0,
                    h1k_include_l2: bool = False) -> ErrorReport:
    """Percent relative errors of the multiscale field against the reference.

    The H1_kappa reading is the kappa-weighted space-time gradient seminorm
    (the W-norm); ``h1k_include_l2`` switches to the full norm
    sqrt(W^2 + L2^2) for probing the alternative convention.
    """
    if reference.shape != multiscale.shape:
        raise ValueError("fields must live on the same fine grid")
    region = full_region(grid)
    diff = reference - multiscale
    kinds = ("L2", "W")
    acc_ref = {k: 0.0 for k in kinds}
    acc_diff = {k: 0.0 for k in kinds}
    for k in region.fine_intervals(grid):
        er = _interval_energies(grid, field, pou, region, k,
                                reference[k - 1], reference[k], kinds, None)
        ed = _interval_energies(grid, field, pou, region, k,
                                diff[k - 1], diff[k], kinds, None)
        for kd in kinds:
            acc_ref[kd] += er[kd]
            acc_diff[kd] += ed[kd]
    if acc_ref["L2"] <= 0.0:
        raise ZeroDivisionError("reference field has zero L2 norm")
    rel_l2 = 100.0 * np.sqrt(acc_diff["L2"] / acc_ref["L2"])
    if h1k_include_l2:
        rel_h1 = 100.0 * np.sqrt((acc_diff["W"] + acc_diff["L2"])
                                 / (acc_ref["W"] + acc_ref["L2"]))
    else:
        if acc_ref["W"] <= 0.0:
            raise ZeroDivisionError("reference field has zero W norm")
        rel_h1 = 100.0 * np.sqrt(acc_diff["W"] / acc_ref["W"])
    return ErrorReport(ell_x, ell_t, float(rel_l2), float(rel_h1))
