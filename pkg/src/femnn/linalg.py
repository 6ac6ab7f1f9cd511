"""Small dense linear algebra on numpy arrays.

Matrices are 2-D ``ndarray`` objects and vectors 1-D ones, either float64
or complex128.  Every system in this package has at most a few hundred
unknowns, so everything is dense.
"""

import numpy as np

from .errors import ShapeError, SingularMatrixError

PIVOT_TOL = 1e-12


class _SolveCounter:
    """Counts direct solves; training code is checked against it."""

    def __init__(self):
        self.calls = 0

    def reset(self):
        self.calls = 0


solve_counter = _SolveCounter()


def as_matrix(A):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    return A if np.iscomplexobj(A) else A.astype(float, copy=False)


def as_vector(x):
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    return x if np.iscomplexobj(x) else x.astype(float, copy=False)


def matvec(A, x):
    """Return ``A @ x`` after checking ``A.cols == len(x)``."""
    A, x = as_matrix(A), as_vector(x)
    if A.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: matrix has {A.shape[1]} columns, vector has {x.shape[0]} entries")
    return A @ x


def vecmat(x, A):
    """Return the row-vector product ``x^T A`` (no conjugation)."""
    A, x = as_matrix(A), as_vector(x)
    if A.shape[0] != x.shape[0]:
        raise ShapeError(f"vecmat: vector has {x.shape[0]} entries, matrix has {A.shape[0]} rows")
    return x @ A


def euclidean_norm(x):
    """Two-norm; complex entries contribute their squared modulus."""
    x = as_vector(x)
    if np.iscomplexobj(x):
        return float(np.sqrt(np.sum(x.real**2 + x.imag**2)))
    return float(np.sqrt(np.dot(x, x)))


def lu_factor(A, pivot_tol=PIVOT_TOL):
    """LU factorisation with partial (row) pivoting.

    Returns ``(LU, perm)`` where the strict lower triangle of ``LU`` holds the
    unit-lower factor, the upper triangle holds ``U`` and ``A[perm] = L @ U``.

    Raises
    ------
    SingularMatrixError
        If, after pivoting, a pivot is not larger than ``pivot_tol`` times the
        largest magnitude in the corresponding column of ``A``.
    """
    A = as_matrix(A)
    n, m = A.shape
    if n != m:
        raise ShapeError(f"lu_factor: matrix must be square, got {A.shape}")
    LU = A.astype(np.result_type(A, float), copy=True)
    perm = np.arange(n)
    col_scale = np.max(np.abs(A), axis=0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(LU[k:, k])))
        if abs(LU[p, k]) <= pivot_tol * col_scale[k] or col_scale[k] == 0.0:
            raise SingularMatrixError(f"matrix is singular to working precision (pivot {k})")
        if p != k:
            LU[[k, p]] = LU[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        LU[k + 1:, k] /= LU[k, k]
        LU[k + 1:, k + 1:] -= np.outer(LU[k + 1:, k], LU[k, k + 1:])
    return LU, perm


def lu_substitute(LU, perm, b):
    b = as_vector(b)
    n = LU.shape[0]
    if b.shape[0] != n:
        raise ShapeError(f"lu_solve: matrix has {n} rows, right-hand side has {b.shape[0]}")
    y = b[perm].astype(np.result_type(LU, b), copy=True)
    for i in range(1, n):
        y[i] -= LU[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - LU[i, i + 1:] @ y[i + 1:]) / LU[i, i]
    return y


def lu_solve(A, b, pivot_tol=PIVOT_TOL):
    """Solve ``A x = b`` by Gaussian elimination with partial pivoting."""
    A, b = as_matrix(A), as_vector(b)
    if A.shape[0] != b.shape[0]:
        raise ShapeError(f"lu_solve: matrix has {A.shape[0]} rows, right-hand side has {b.shape[0]}")
    solve_counter.calls += 1
    LU, perm = lu_factor(A, pivot_tol)
    return lu_substitute(LU, perm, b)
