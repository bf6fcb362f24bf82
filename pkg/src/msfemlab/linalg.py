"""Sparse storage and the solver kernels used throughout the library.

CSR storage and matrix-vector products are backed by scipy.sparse; the
iterative and direct solver loops are written out here so that tolerance
semantics, breakdown handling and determinism are pinned down exactly:
results depend only on the numerical inputs, never on assembly order or
thread schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

__all__ = [
    "SparseMatrix",
    "ConstraintBlock",
    "NoConvergenceError",
    "SingularMatrixError",
    "ConstraintDegenerateError",
    "csr_from_triplets",
    "cg_solve",
    "bicgstab_solve",
    "dense_lu_solve",
    "constrained_solve",
]


class NoConvergenceError(RuntimeError):
    """Iterative solver missed the tolerance; carries the final residual."""

    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


class SingularMatrixError(RuntimeError):
    """Dense factorization hit a negligible pivot."""


class ConstraintDegenerateError(RuntimeError):
    """The constraint block is (numerically) rank deficient."""


@dataclass
class SparseMatrix:
    """Square-or-rectangular sparse matrix in CSR form."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _backend: scipy.sparse.csr_matrix = field(default=None, repr=False, compare=False)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.data)

    @property
    def backend(self) -> scipy.sparse.csr_matrix:
        if self._backend is None:
            self._backend = scipy.sparse.csr_matrix(
                (self.data, self.indices, self.indptr), shape=self.shape)
        return self._backend

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.backend @ x

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self.backend.T @ x

    def diagonal(self) -> np.ndarray:
        return self.backend.diagonal()

    def toarray(self) -> np.ndarray:
        return self.backend.toarray()

    def transpose(self) -> "SparseMatrix":
        t = self.backend.T.tocsr()
        return SparseMatrix(self.n_cols, self.n_rows, t.indptr, t.indices, t.data)


@dataclass
class ConstraintBlock:
    """A small block of dense linear constraints C x = g (at most three rows)."""

    C: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if self.C.shape[0] != self.g.shape[0]:
            raise ValueError("constraint matrix and right-hand side disagree")
        if self.C.shape[0] > 3:
            raise ValueError("at most three constraint rows are supported")

    @property
    def k(self) -> int:
        return self.C.shape[0]


def csr_from_triplets(n: int, triplets) -> SparseMatrix:
    """Assemble an n-by-n CSR matrix from (row, col, value) triplets.

    Duplicate entries are summed.  The triplets are brought into a canonical
    order (row, column, value bit pattern) before summation, so the result
    is bitwise independent of the order in which the triplets were
    generated.  For bulk assembly a tuple of three equal-length arrays
    (rows, cols, values) is accepted in place of a list of triples.
    """
    if (isinstance(triplets, tuple) and len(triplets) == 3
            and all(isinstance(t, np.ndarray) for t in triplets)):
        rows, cols, values = triplets
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
    else:
        flat = list(triplets)
        rows = np.array([t[0] for t in flat], dtype=np.int64)
        cols = np.array([t[1] for t in flat], dtype=np.int64)
        values = np.array([t[2] for t in flat], dtype=np.float64)
    if not (len(rows) == len(cols) == len(values)):
        raise ValueError("triplet arrays must have equal length")
    if len(rows) == 0:
        return SparseMatrix(n, n, np.zeros(n + 1, dtype=np.int64),
                            np.zeros(0, dtype=np.int64), np.zeros(0))
    if rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n:
        raise ValueError("triplet index out of range")

    order = np.lexsort((values.view(np.int64), cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    new_group = np.empty(len(rows), dtype=bool)
    new_group[0] = True
    np.not_equal(rows[1:], rows[:-1], out=new_group[1:])
    new_group[1:] |= cols[1:] != cols[:-1]
    starts = np.flatnonzero(new_group)
    data = np.add.reduceat(values, starts)
    out_rows = rows[starts]
    out_cols = cols[starts]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, out_rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return SparseMatrix(n, n, indptr, out_cols, data)


def _as_matvec(A):
    if isinstance(A, SparseMatrix):
        return A.matvec, A.n_rows, A.diagonal()
    if scipy.sparse.issparse(A):
        return (lambda x: A @ x), A.shape[0], np.asarray(A.diagonal())
    if hasattr(A, "matvec") and hasattr(A, "diagonal"):
        return A.matvec, A.shape[0], np.asarray(A.diagonal())
    A = np.asarray(A, dtype=float)
    return (lambda x: A @ x), A.shape[0], np.diagonal(A).copy()


def _jacobi(diag: np.ndarray) -> np.ndarray:
    inv = np.ones_like(diag)
    ok = np.abs(diag) > 0.0
    inv[ok] = 1.0 / diag[ok]
    return inv


def cg_solve(A, b, tol: float = 1e-12, maxit: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    Returns x with ||A x - b|| <= tol * ||b|| on the recomputed residual
    whenever that is attainable in double precision; when rounding limits
    the recomputed residual (it stops improving across restarts) the best
    iterate is accepted provided it is below 1e-8 relative.  Raises
    NoConvergenceError (carrying the final residual) on breakdown, budget
    exhaustion, or an unacceptable stagnation level.
    """
    matvec, n, diag = _as_matvec(A)
    b = np.asarray(b, dtype=float)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros(n)
    if maxit is None:
        maxit = max(1000, 250 * int(math.isqrt(n)))
    inv_diag = _jacobi(diag)
    target = tol * norm_b

    x = np.zeros(n)
    best_true = math.inf
    restarts = 0
    it = 0
    while it < maxit:
        r = b - matvec(x) if restarts else b.copy()
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        converged = False
        while it < maxit:
            it += 1
            Ap = matvec(p)
            pAp = float(p @ Ap)
            if pAp <= 0.0 or not math.isfinite(pAp):
                raise NoConvergenceError(
                    f"cg breakdown at iteration {it} (p^T A p = {pAp})",
                    residual=float(np.linalg.norm(matvec(x) - b)))
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            if float(np.linalg.norm(r)) <= target:
                converged = True
                break
            z = inv_diag * r
            rz_next = float(r @ z)
            beta = rz_next / rz
            rz = rz_next
            p = z + beta * p
        if not converged:
            break
        true_res = float(np.linalg.norm(matvec(x) - b))
        if true_res <= target:
            return x
        if restarts >= 3 or true_res > 0.5 * best_true:
            # recurrence has converged; the recomputed residual sits at the
            # rounding floor and further iteration cannot lower it
            if true_res <= 1e-8 * norm_b:
                return x
            raise NoConvergenceError(
                f"cg stagnated at relative residual {true_res / norm_b:.3e}",
                residual=true_res)
        best_true = min(best_true, true_res)
        restarts += 1
    raise NoConvergenceError(
        f"cg did not reach tol={tol} within {maxit} iterations",
        residual=float(np.linalg.norm(matvec(x) - b)))


def bicgstab_solve(A, b, tol: float = 1e-12, maxit: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned BiCGStab for general (non-symmetric) systems.

    Same tolerance contract as cg_solve, including the attainable-accuracy
    plateau handling on restarts.
    """
    matvec, n, diag = _as_matvec(A)
    b = np.asarray(b, dtype=float)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros(n)
    if maxit is None:
        maxit = max(1000, 250 * int(math.isqrt(n)))
    inv_diag = _jacobi(diag)
    target = tol * norm_b

    x = np.zeros(n)
    best_true = math.inf
    restarts = 0
    it = 0
    while it < maxit:
        r = b - matvec(x) if restarts else b.copy()
        r_hat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        converged = False
        breakdown = None
        first = True
        while it < maxit:
            it += 1
            rho_next = float(r_hat @ r)
            if rho_next == 0.0 or not math.isfinite(rho_next):
                breakdown = f"rho = {rho_next}"
                break
            if first:
                p = r.copy()
                first = False
            else:
                beta = (rho_next / rho) * (alpha / omega)
                p = r + beta * (p - omega * v)
            rho = rho_next
            p_hat = inv_diag * p
            v = matvec(p_hat)
            denom = float(r_hat @ v)
            if denom == 0.0 or not math.isfinite(denom):
                breakdown = f"r_hat . v = {denom}"
                break
            alpha = rho / denom
            s = r - alpha * v
            if float(np.linalg.norm(s)) <= target:
                x += alpha * p_hat
                converged = True
                break
            s_hat = inv_diag * s
            t = matvec(s_hat)
            tt = float(t @ t)
            if tt == 0.0:
                breakdown = "t = 0"
                break
            omega = float(t @ s) / tt
            x += alpha * p_hat + omega * s_hat
            r = s - omega * t
            if float(np.linalg.norm(r)) <= target:
                converged = True
                break
            if omega == 0.0:
                breakdown = "omega = 0"
                break
        if not converged and breakdown is None:
            break
        true_res = float(np.linalg.norm(matvec(x) - b))
        if true_res <= target:
            return x
        # a degenerate Krylov direction (breakdown) is recoverable the same
        # way as a stalled recurrence: restart from the current iterate with
        # a fresh shadow residual, as long as restarts keep making progress
        if restarts >= 3 or true_res > 0.5 * best_true:
            if true_res <= 1e-8 * norm_b:
                return x
            if breakdown is not None:
                raise NoConvergenceError(
                    f"bicgstab breakdown at iteration {it} ({breakdown})",
                    residual=true_res)
            raise NoConvergenceError(
                f"bicgstab stagnated at relative residual {true_res / norm_b:.3e}",
                residual=true_res)
        best_true = min(best_true, true_res)
        restarts += 1
    raise NoConvergenceError(
        f"bicgstab did not reach tol={tol} within {maxit} iterations",
        residual=float(np.linalg.norm(matvec(x) - b)))


def dense_lu_solve(A, B) -> np.ndarray:
    """Dense LU with partial pivoting for one or more right-hand sides.

    B may be a vector or an (n, m) block of columns; the result has the
    same shape.  Raises SingularMatrixError when a pivot falls below 1e-14
    times the largest magnitude of the input matrix.
    """
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("dense_lu_solve expects a square matrix")
    single = B.ndim == 1
    X = B.reshape(n, -1)
    scale = float(np.max(np.abs(A))) if n else 0.0
    threshold = 1e-14 * scale
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(A[col:, col])))
        pivot = A[pivot_row, col]
        if abs(pivot) <= threshold:
            raise SingularMatrixError(
                f"pivot {pivot:.3e} below threshold {threshold:.3e} in column {col}")
        if pivot_row != col:
            A[[col, pivot_row]] = A[[pivot_row, col]]
            X[[col, pivot_row]] = X[[pivot_row, col]]
        factors = A[col + 1:, col] / pivot
        A[col + 1:, col + 1:] -= np.outer(factors, A[col, col + 1:])
        X[col + 1:] -= np.outer(factors, X[col])
    for col in range(n - 1, -1, -1):
        X[col] = (X[col] - A[col, col + 1:] @ X[col + 1:]) / A[col, col]
    return X[:, 0] if single else X


def constrained_solve(A, b, cb: ConstraintBlock | None = None,
                      gamma: float | None = None, tol: float = 1e-12,
                      symmetric: bool = True):
    """Solve A x + C^T lam = b, C x = g via an augmented operator.

    The augmented matrix M = A + gamma C^T C is solved once per load column
    and once per constraint row; the k-by-k Schur complement then yields
    the multipliers.  b may be a vector or an (n, m) block of loads sharing
    the constraint data (the constraint-column solves are reused).  Returns
    (x, lam) with shapes matching b.  Raises ConstraintDegenerateError when
    the Schur complement is singular.  Applying it with an empty constraint
    block is exactly an unconstrained solve.
    """
    matvec, n, diag = _as_matvec(A)
    b = np.asarray(b, dtype=float)
    inner = cg_solve if symmetric else bicgstab_solve
    single = b.ndim == 1
    B = b.reshape(n, -1)

    if cb is None or cb.k == 0:
        X = np.column_stack([inner(A, B[:, j], tol=tol) for j in range(B.shape[1])])
        return (X[:, 0] if single else X), np.zeros(0)

    C = cb.C
    g = cb.g
    k = cb.k
    if C.shape[1] != n:
        raise ValueError("constraint row length does not match the system size")
    if gamma is None:
        trace = float(np.sum(diag))
        gamma = trace / n if trace > 0.0 else 1.0

    aug_diag = diag + gamma * np.sum(C * C, axis=0)

    class _Augmented:
        def __init__(self):
            self.shape = (n, n)

        def matvec(self, v):
            return matvec(v) + gamma * (C.T @ (C @ v))

        def diagonal(self):
            return aug_diag

    M = _Augmented()

    def aug_solve(rhs):
        if np.all(rhs == 0.0):
            return np.zeros(n)
        return inner(M, rhs, tol=tol)

    Y = np.column_stack([aug_solve(B[:, j]) for j in range(B.shape[1])])
    Z = np.column_stack([aug_solve(C[j]) for j in range(k)])
    S = C @ Z
    try:
        mu = dense_lu_solve(S, C @ Y - g[:, None])
    except SingularMatrixError as exc:
        raise ConstraintDegenerateError(
            f"constraint Schur complement is singular: {exc}") from exc
    X = Y - Z @ mu
    lam = mu + gamma * g[:, None]

    violation = float(np.max(np.linalg.norm(C @ X - g[:, None], axis=0)))
    if violation > 1e-9 * (1.0 + float(np.linalg.norm(g))):
        raise NoConvergenceError(
            f"constraint violation {violation:.3e} after constrained solve",
            residual=violation)
    if single:
        return X[:, 0], lam[:, 0]
    return X, lam
