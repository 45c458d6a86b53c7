"""Direct sparse factorization with an explicit reuse and residual contract.

Thin wrapper around SuperLU. A factorization is built once and reused for
many right-hand sides (the basis construction solves the same operator for
every auxiliary degree of freedom, and the marching engine reuses interval
operators across columns). Solves are deterministic: identical inputs give
bitwise-identical outputs.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SINGULAR_PIVOT_REL = 1e-14


class SingularMatrixError(ValueError):
    """Raised when a factorization hits a numerically zero pivot."""

    def __init__(self, message, pivot_index=None):
        super().__init__(message)
        self.pivot_index = pivot_index


class Factorization:
    """LU factorization handle; valid only for the matrix it was built from."""

    def __init__(self, lu, shape, scale):
        self._lu = lu
        self.shape = shape
        self._scale = scale

    def solve(self, rhs: np.ndarray, trans: str = "N") -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.shape[0]:
            raise ValueError(f"right-hand side length {rhs.shape[0]} does not match "
                             f"matrix dimension {self.shape[0]}")
        return self._lu.solve(rhs, trans=trans)


def factorize(A, symmetric_pattern: bool = False) -> Factorization:
    """Exact sparse LU with partial pivoting, reusable across right-hand sides.

    Raises SingularMatrixError when a pivot falls below
    SINGULAR_PIVOT_REL times the largest matrix entry.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if A.nnz and not np.all(np.isfinite(A.data)):
        raise ValueError("matrix entries must be finite")
    scale = np.max(np.abs(A.data)) if A.nnz else 0.0
    if scale == 0.0:
        raise SingularMatrixError("matrix is identically zero", pivot_index=0)
    opts = {"permc_spec": "MMD_AT_PLUS_A"} if symmetric_pattern else {}
    try:
        lu = spla.splu(A, **opts)
    except RuntimeError as exc:
        raise SingularMatrixError(f"factorization failed: {exc}") from exc
    piv = np.abs(lu.U.diagonal())
    bad = np.nonzero(piv < SINGULAR_PIVOT_REL * scale)[0]
    if bad.size:
        raise SingularMatrixError(
            f"numerically singular: pivot {piv[bad[0]]:.3e} at index {bad[0]} "
            f"(matrix scale {scale:.3e})", pivot_index=int(bad[0]))
    return Factorization(lu, A.shape, scale)


def solve_many(F: Factorization, rhs_columns: np.ndarray) -> np.ndarray:
    """Solve A X = B column-wise against one factorization.

    Accepts a vector or a (n, ncols) matrix of columns; preserves the shape.
    """
    B = np.asarray(rhs_columns, dtype=float)
    if B.shape[0] != F.shape[0]:
        raise ValueError(f"column length {B.shape[0]} does not match matrix "
                         f"dimension {F.shape[0]}")
    if B.size == 0 or not np.any(B):
        return np.zeros_like(B)
    return F.solve(B)
