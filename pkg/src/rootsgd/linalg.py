"""Dense linear-algebra kernels for the analysis toolkit.

Everything here is sized for small problems (d <= 20, flattened systems up
to ~400x400), so a single partial-pivoted LU is the only factorization and
all storage is dense row-major float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SingularMatrixError",
    "check_symmetric",
    "guarded_ceil",
    "kron",
    "lu_factor",
    "lu_solve",
    "solve_dense",
    "unvec",
    "vec",
]

# Relative slack used when verifying that a matrix handed to a symmetric
# consumer really is symmetric.
SYMMETRY_RTOL = 1e-12

# A pivot below this fraction of the largest initial entry is treated as an
# exactly singular matrix.
PIVOT_RTOL = 1e-14


class SingularMatrixError(ValueError):
    """Raised when partial pivoting cannot find an acceptable pivot."""


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_symmetric(a, name: str = "matrix") -> np.ndarray:
    """Validate that ``a`` is symmetric up to 1e-12 * (1 + max|entry|)."""
    a = _as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if a.size:
        bound = SYMMETRY_RTOL * (1.0 + np.abs(a).max())
        gap = np.abs(a - a.T).max()
        if gap > bound:
            raise ValueError(
                f"{name} is not symmetric: max |A_ij - A_ji| = {gap:.3e} "
                f"exceeds {bound:.3e}"
            )
    return a


def guarded_ceil(x: float) -> int:
    """Ceiling with a relative guard against floating-point overshoot.

    Formulas of the form ceil(24 / (mu * eta)) are exact integers for many
    natural parameter choices; a bare ceil would turn 384.0000000000001 into
    385.  The guard subtracts a relative epsilon before rounding up.
    """
    x = float(x)
    return int(np.ceil(x - 1e-12 * max(1.0, abs(x))))


def lu_factor(a) -> tuple[np.ndarray, np.ndarray]:
    """Partial-pivoted LU factorization of a square matrix.

    Returns ``(lu, piv)`` where ``lu`` packs the unit-lower and upper factors
    and ``piv[k]`` is the row swapped into position ``k`` at step ``k``.

    Raises:
        SingularMatrixError: if a pivot magnitude falls below
            1e-14 * (max initial absolute entry).
    """
    lu = np.array(_as_matrix(a), dtype=float, order="C", copy=True)
    n, m = lu.shape
    if n != m:
        raise ValueError(f"matrix must be square, got shape {lu.shape}")
    if n == 0:
        raise ValueError("matrix must be at least 1x1")
    scale = np.abs(lu).max()
    if scale == 0.0:
        raise SingularMatrixError("matrix is identically zero")
    tol = PIVOT_RTOL * scale
    piv = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) < tol:
            raise SingularMatrixError(
                f"pivot {abs(lu[p, k]):.3e} below threshold {tol:.3e} "
                f"at column {k}"
            )
        if p != k:
            lu[[k, p]] = lu[[p, k]]
        piv[k] = p
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, piv


def lu_solve(factorization: tuple[np.ndarray, np.ndarray], b) -> np.ndarray:
    """Solve using a factorization from :func:`lu_factor`.

    ``b`` may be a vector or a matrix of stacked right-hand-side columns.
    """
    lu, piv = factorization
    n = lu.shape[0]
    x = np.array(b, dtype=float, copy=True)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    if x.shape[0] != n:
        raise ValueError(f"rhs has {x.shape[0]} rows, expected {n}")
    for k in range(n):
        p = piv[k]
        if p != k:
            x[[k, p]] = x[[p, k]]
    for k in range(n):  # forward substitution, unit lower factor
        x[k + 1 :] -= np.outer(lu[k + 1 :, k], x[k])
    for k in range(n - 1, -1, -1):  # back substitution
        x[k] /= lu[k, k]
        x[:k] -= np.outer(lu[:k, k], x[k])
    return x[:, 0] if vector else x


def solve_dense(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` by partial-pivoted LU.

    Satisfies ``||a @ x - b||_2 <= 1e-10 * (1 + ||b||_2)`` on well-conditioned
    systems (condition number up to ~1e6).
    """
    return lu_solve(lu_factor(a), b)


def kron(a, b) -> np.ndarray:
    """Kronecker product: out[(i*p + k), (j*q + l)] = a[i, j] * b[k, l]."""
    return np.kron(_as_matrix(a, "a"), _as_matrix(b, "b"))


def vec(a) -> np.ndarray:
    """Column-stacking vectorization, the convention under which
    ``kron(a, b) @ vec(x) == vec(b @ x @ a.T)``."""
    return _as_matrix(a).ravel(order="F")


def unvec(v, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != rows * cols:
        raise ValueError(f"cannot reshape {v.shape} into {rows}x{cols}")
    return v.reshape((cols, rows)).T.copy()
