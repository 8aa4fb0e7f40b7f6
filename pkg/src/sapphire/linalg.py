"""Small dense/sparse kernels shared by the solvers.

Sparse data lives in canonical CSR form (``scipy.sparse.csr_matrix`` with
sorted, duplicate-free indices and no stored zeros). Dense factors are plain
``numpy`` arrays. Factorizations here only ever see small blocks
(``b_H x b_H`` or ``r x r``), so they favour clarity over blocking.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

__all__ = [
    "NotPositiveDefiniteError",
    "PowerIterationResult",
    "as_csr",
    "cholesky",
    "power_iteration",
    "solve_lower",
    "solve_upper",
    "spmv",
    "spmv_t",
    "thin_svd",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite (pivot {pivot} = {value:.3e})")
        self.pivot = pivot
        self.value = value


def as_csr(A, shape: Optional[tuple[int, int]] = None) -> sp.csr_matrix:
    """Return ``A`` as a canonical float64 CSR matrix.

    Duplicate coordinates are summed and explicit zeros dropped, so two
    matrices with equal entries have identical ``indptr/indices/data``.
    """
    if sp.issparse(A):
        M = sp.csr_matrix(A, dtype=np.float64, shape=shape, copy=True)
    else:
        M = sp.csr_matrix(np.asarray(A, dtype=np.float64), shape=shape)
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()
    return M


def _check_vector(x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise ValueError(f"{what}: expected vector of length {n}, got shape {x.shape}")
    return x


def spmv(A, x) -> np.ndarray:
    """Compute ``A @ x`` for a CSR (or dense) matrix."""
    x = _check_vector(x, A.shape[1], "spmv")
    return np.asarray(A @ x).ravel()


def spmv_t(A, x) -> np.ndarray:
    """Compute ``A.T @ x`` for a CSR (or dense) matrix."""
    x = _check_vector(x, A.shape[0], "spmv_t")
    return np.asarray(A.T @ x).ravel()


def cholesky(S) -> np.ndarray:
    """Lower-triangular Cholesky factor ``C`` with ``C @ C.T == S``.

    Column-oriented left-looking factorization. Raises
    :class:`NotPositiveDefiniteError` carrying the failing pivot index.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"cholesky: expected a square matrix, got shape {S.shape}")
    n = S.shape[0]
    scale = max(np.abs(S).max(initial=0.0), 1.0)
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError("cholesky: matrix is not symmetric")
    C = np.zeros_like(S)
    for j in range(n):
        row = C[j, :j]
        d = S[j, j] - row @ row
        if not d > 0.0:
            raise NotPositiveDefiniteError(j, float(d))
        cjj = np.sqrt(d)
        C[j, j] = cjj
        if j + 1 < n:
            C[j + 1 :, j] = (S[j + 1 :, j] - C[j + 1 :, :j] @ row) / cjj
    return C


def solve_lower(C, b) -> np.ndarray:
    """Solve ``C x = b`` with ``C`` lower triangular."""
    return scipy.linalg.solve_triangular(C, b, lower=True, check_finite=False)


def solve_upper(C, b, trans: bool = False) -> np.ndarray:
    """Solve ``C.T x = b`` when ``trans`` and ``C`` is lower; ``C x = b`` for upper ``C``."""
    if trans:
        return scipy.linalg.solve_triangular(C, b, lower=True, trans="T", check_finite=False)
    return scipy.linalg.solve_triangular(C, b, lower=False, check_finite=False)


def thin_svd(M) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and singular values of a tall ``p x r`` matrix.

    Computed as a reduced QR of ``M`` followed by an SVD of the small
    ``r x r`` triangular factor, so the cost is ``O(p r^2)``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < M.shape[1]:
        raise ValueError(f"thin_svd: expected a tall matrix, got shape {M.shape}")
    Q, R = np.linalg.qr(M, mode="reduced")
    Ur, s, _ = np.linalg.svd(R)
    return Q @ Ur, s


class PowerIterationResult(NamedTuple):
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-6,
    max_iter: int = 100,
    seed: int = 0,
    metric: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> PowerIterationResult:
    """Largest eigenvalue of a symmetric PSD operator.

    With ``metric`` given, ``apply`` is taken to be ``M^{-1} K`` for SPD
    ``M = metric`` and the iteration runs in the ``M`` inner product, which
    yields the top generalized eigenvalue of ``(K, M)`` without forming
    ``M^{-1/2}``.

    Stops once successive Rayleigh quotients agree to relative ``tol``.
    The estimate never exceeds the true value (it is a Rayleigh quotient).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim)
    inner = (lambda u, v: u @ v) if metric is None else (lambda u, v: u @ metric(v))
    x /= np.sqrt(inner(x, x))
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = apply(x)
        lam_new = float(inner(x, y))
        norm = np.sqrt(max(inner(y, y), 0.0))
        if norm == 0.0:
            return PowerIterationResult(0.0, x, it, True)
        x = y / norm
        if it > 1 and abs(lam_new - lam) <= tol * abs(lam_new):
            return PowerIterationResult(lam_new, x, it, True)
        lam = lam_new
    return PowerIterationResult(lam, x, max_iter, False)
