"""Compressed-row matrices, ILU(0) and restarted GMRES."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_RESTART = 30
DEFAULT_RTOL = 1e-10
DEFAULT_MAXITER = 2000


class ZeroPivotError(ArithmeticError):
    pass


class LinearSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class SparseMatrix:
    """Square or rectangular CSR matrix with sorted, unique column indices."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=float)
        n_rows, n_cols = self.shape
        if len(indptr) != n_rows + 1 or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("inconsistent row offsets")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("row offsets must be monotone")
        if len(data) != len(indices):
            raise ValueError("values and column indices differ in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= n_cols):
            raise ValueError("column index out of range")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_csr", sp.csr_matrix((data, indices, indptr), shape=self.shape))

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=float)))

    def scipy(self) -> sp.csr_matrix:
        return self._csr

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def __matmul__(self, x):
        return self._csr @ x

    @property
    def nnz(self) -> int:
        return len(self.data)

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()


@numba.njit(cache=True, nogil=True)
def _ilu0_kernel(indptr, indices, data):
    n = len(indptr) - 1
    lu = data.copy()
    diag = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] == i:
                diag[i] = p
        if diag[i] < 0:
            return lu, diag, i
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            pos[indices[p]] = p
        for p in range(indptr[i], diag[i]):
            k = indices[p]
            piv = lu[diag[k]]
            if piv == 0.0:
                return lu, diag, k
            lu[p] /= piv
            mult = lu[p]
            for q in range(diag[k] + 1, indptr[k + 1]):
                t = pos[indices[q]]
                if t >= 0:
                    lu[t] -= mult * lu[q]
        for p in range(indptr[i], indptr[i + 1]):
            pos[indices[p]] = -1
        if lu[diag[i]] == 0.0:
            return lu, diag, i
    return lu, diag, -1


@numba.njit(cache=True, nogil=True)
def _ilu0_apply(indptr, indices, lu, diag, b):
    n = len(b)
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        for p in range(indptr[i], diag[i]):
            acc -= lu[p] * y[indices[p]]
        y[i] = acc
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for p in range(diag[i] + 1, indptr[i + 1]):
            acc -= lu[p] * y[indices[p]]
        y[i] = acc / lu[diag[i]]
    return y


@dataclass(frozen=True)
class IluPreconditioner:
    """ILU(0) factors stored on the pattern of the source matrix.

    Entries left of the diagonal hold the unit lower factor ``L`` (unit
    diagonal implied), the diagonal and entries to its right hold ``U``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    lu: np.ndarray
    diag: np.ndarray

    def solve(self, b: np.ndarray) -> np.ndarray:
        return _ilu0_apply(self.indptr, self.indices, self.lu, self.diag,
                           np.ascontiguousarray(b, dtype=float))

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(L, U)``; for tests and small matrices."""
        n = len(self.indptr) - 1
        L, U = np.eye(n), np.zeros((n, n))
        for i in range(n):
            for p in range(self.indptr[i], self.indptr[i + 1]):
                j = self.indices[p]
                if j < i:
                    L[i, j] = self.lu[p]
                else:
                    U[i, j] = self.lu[p]
        return L, U


def ilu0(A: SparseMatrix) -> IluPreconditioner:
    """Incomplete LU factorisation with zero fill-in.

    Raises :class:`ZeroPivotError` on a structurally missing or vanishing
    pivot.
    """
    n_rows, n_cols = A.shape
    if n_rows != n_cols:
        raise ValueError("ILU(0) needs a square matrix")
    lu, diag, bad = _ilu0_kernel(A.indptr, A.indices, A.data)
    if bad >= 0:
        raise ZeroPivotError(f"zero pivot in row {bad}")
    return IluPreconditioner(A.indptr, A.indices, lu, diag)


@dataclass
class KrylovResult:
    x: np.ndarray
    residual: float                  # true ||b - Ax|| / ||b||
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    breakdown: bool = False


def gmres(A, b, M: IluPreconditioner | None = None, rel_tol: float = DEFAULT_RTOL,
          restart: int = DEFAULT_RESTART, max_iters: int = DEFAULT_MAXITER,
          x0: np.ndarray | None = None) -> KrylovResult:
    """Restarted GMRES with right preconditioning.

    With right preconditioning the Arnoldi residual is the residual of the
    original system, so ``history`` (relative residual after each inner
    step) is non-increasing within every cycle.
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    b = np.asarray(b, dtype=float)
    n = len(b)
    if A.shape != (n, n):
        raise ValueError(f"matrix shape {A.shape} does not match rhs length {n}")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return KrylovResult(np.zeros(n), 0.0, 0, True)
    precond = (lambda v: v) if M is None else M.solve
    m = max(1, min(restart, n))
    total = 0
    history: list[float] = []
    breakdown = False

    while True:
        r = b - A @ x
        beta = float(np.linalg.norm(r))
        if beta / bnorm <= rel_tol or total >= max_iters or breakdown:
            break
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for j in range(m):
            w = A @ precond(V[j])
            # classical Gram-Schmidt, applied twice
            h = V[:j + 1] @ w
            w -= h @ V[:j + 1]
            h2 = V[:j + 1] @ w
            w -= h2 @ V[:j + 1]
            H[:j + 1, j] = h + h2
            hnext = float(np.linalg.norm(w))
            H[j + 1, j] = hnext
            for i in range(j):
                hij, hi1j = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * hij + sn[i] * hi1j
                H[i + 1, j] = -sn[i] * hij + cs[i] * hi1j
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                breakdown = True
                k = j
                break
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            k = j + 1
            history.append(abs(g[j + 1]) / bnorm)
            if hnext <= 1e-14 * beta:
                # happy breakdown: Krylov space is invariant
                breakdown = True
                break
            V[j + 1] = w / hnext
            if history[-1] <= rel_tol or total >= max_iters:
                break
        if k == 0:
            break
        y = _back_substitute(H[:k, :k], g[:k])
        x = x + precond(y @ V[:k])
    # a breakdown that did not reach rel_tol surfaces as converged=False
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    return KrylovResult(x, res, total, res <= rel_tol, history, breakdown)


def _back_substitute(R, g):
    k = len(g)
    y = np.zeros(k)
    for i in range(k - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


def cg(A, b, M: IluPreconditioner | None = None, rel_tol: float = DEFAULT_RTOL,
       max_iters: int = DEFAULT_MAXITER) -> KrylovResult:
    """Preconditioned conjugate gradients for SPD systems."""
    b = np.asarray(b, dtype=float)
    n = len(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return KrylovResult(np.zeros(n), 0.0, 0, True)
    precond = (lambda v: v) if M is None else M.solve
    x = np.zeros(n)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = r @ z
    history = []
    it = 0
    while it < max_iters:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        history.append(float(np.linalg.norm(r)) / bnorm)
        if history[-1] <= rel_tol:
            break
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    return KrylovResult(x, res, it, res <= rel_tol, history)


def solve(A: SparseMatrix, b, method: str = "gmres", precondition: bool = True,
          rel_tol: float = DEFAULT_RTOL, restart: int = DEFAULT_RESTART,
          max_iters: int = DEFAULT_MAXITER, x0: np.ndarray | None = None) -> KrylovResult:
    """Solve ``A x = b`` with ILU(0)-preconditioned GMRES (or CG).

    Falls back to the unpreconditioned iteration when ILU(0) hits a zero
    pivot. Raises :class:`LinearSolveError` if the tolerance is not met.
    """
    M = None
    if precondition:
        try:
            M = ilu0(A)
        except ZeroPivotError as exc:
            log.warning("ILU(0) failed (%s); solving without preconditioner", exc)
    if method == "gmres":
        out = gmres(A, b, M, rel_tol=rel_tol, restart=restart, max_iters=max_iters, x0=x0)
    elif method == "cg":
        out = cg(A, b, M, rel_tol=rel_tol, max_iters=max_iters)
    else:
        raise ValueError(f"unknown linear solver {method!r}")
    if not out.converged:
        raise LinearSolveError(
            f"{method} stopped at relative residual {out.residual:.3e} after {out.iterations} iterations")
    return out
