"""Artifact writers: errors CSV, decay CSV and legacy-VTK snapshots.

CSV files are UTF-8, LF line endings, '.' decimal separator, with floats
printed via repr so identical runs produce byte-identical files.
"""

from __future__ import annotations

import os

import numpy as np

ERRORS_HEADER = "layers_x,layers_t,rel_l2_pct,rel_h1k_pct,assemble_s,local_solve_s,coarse_solve_s"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_errors_csv(path: str, rows) -> None:
    """rows: iterables matching ERRORS_HEADER column order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ERRORS_HEADER + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_decay_csv(path: str, rows) -> None:
    """rows: (mode, block_n, block_i, layer, energy, slope, r2)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mode,block_n,block_i,layer,energy,fit_slope,fit_r2\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_vtk_structured_points(path: str, name: str, values_2d: np.ndarray,
                                origin=(0.0, 0.0), spacing=(1.0, 1.0)) -> None:
    """Legacy-VTK ASCII STRUCTURED_POINTS file of one spatial nodal slice.

    ``values_2d`` has shape (nny, nnx), x varying fastest on disk as VTK expects.
    """
    nny, nnx = values_2d.shape
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise OSError(f"output directory does not exist: {directory}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nnx} {nny} 1\n")
        fh.write(f"ORIGIN {_fmt(origin[0])} {_fmt(origin[1])} 0.0\n")
        fh.write(f"SPACING {_fmt(spacing[0])} {_fmt(spacing[1])} 1.0\n")
        fh.write(f"POINT_DATA {nnx * nny}\n")
        fh.write(f"SCALARS {name} double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for row in values_2d:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
