"""Subsampled-Newton preconditioners ``P = H_S + (rho + nu) I``.

* :class:`SsnPreconditioner` keeps the scaled sample rows ``B`` (``b_H x p``)
  and inverts through the Woodbury identity with a ``b_H x b_H`` Cholesky.
* :class:`NyssnPreconditioner` keeps a rank-``r`` eigendecomposition from a
  randomized Nystrom sketch.
* :class:`IdentityPreconditioner` turns every solver into its Euclidean
  counterpart.

The ridge ``nu`` of the loss is folded into the shift instead of being
sketched, so ``P = B^T B + sigma I`` with ``sigma = rho + nu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from .linalg import NotPositiveDefiniteError, cholesky, power_iteration, solve_lower, solve_upper, thin_svd
from .losses import GlmLoss

__all__ = [
    "DensePreconditioner",
    "IdentityPreconditioner",
    "NyssnPreconditioner",
    "SpectralReport",
    "SsnPreconditioner",
    "build_nyssn",
    "build_ssn",
    "default_rho",
    "rand_nys_approx",
    "spectral_report",
]

#: power-iteration budget for lambda_max of the SSN preconditioner
LAMBDA_MAX_TOL = 1e-6
LAMBDA_MAX_ITERS = 100
#: conservative scaling applied to 1/lambda_max when power iteration did not converge
UNCONVERGED_STEP_FACTOR = 0.9


class Preconditioner:
    """SPD operator with cheap ``apply``, ``solve`` and ``lambda_max``."""

    p: int
    shift: float
    is_identity = False

    def apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def solve(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lambda_max(self) -> float:
        raise NotImplementedError

    def lambda_max_info(self) -> tuple[float, bool]:
        """``(lambda_max, converged)``; exact operators always report converged."""
        return self.lambda_max(), True

    def dense(self) -> np.ndarray:
        return np.column_stack([self.apply(e) for e in np.eye(self.p)])


@dataclass(frozen=True)
class IdentityPreconditioner(Preconditioner):
    p: int
    shift: float = 1.0
    rho: float = 0.0
    is_identity = True

    def apply(self, v):
        return np.array(v, dtype=np.float64)

    def solve(self, v):
        return np.array(v, dtype=np.float64)

    def lambda_max(self):
        return 1.0


@dataclass(frozen=True, eq=False)
class DensePreconditioner(Preconditioner):
    """Explicit SPD matrix, for tests and small problems."""

    matrix: np.ndarray
    rho: float = 0.0
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "_chol", cholesky(M))

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    @property
    def shift(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def apply(self, v):
        return self.matrix @ np.asarray(v, dtype=np.float64)

    def solve(self, v):
        return solve_upper(self._chol, solve_lower(self._chol, np.asarray(v, dtype=np.float64)), trans=True)

    def lambda_max(self):
        return float(np.linalg.eigvalsh(self.matrix)[-1])

    def dense(self):
        return self.matrix.copy()


@dataclass(frozen=True, eq=False)
class SsnPreconditioner(Preconditioner):
    """``P = B^T B + shift * I`` with ``B`` the scaled Hessian-batch rows.

    When ``b_H < p`` the inverse goes through Woodbury with ``woodbury_chol``
    the Cholesky factor of ``shift I + B B^T``. Otherwise ``P`` is formed
    densely and ``woodbury_chol`` holds the Cholesky factor of ``P`` itself.
    """

    B: object
    shift: float
    woodbury_chol: np.ndarray
    built_at: Optional[int] = None
    seed: int = 0
    P_dense: Optional[np.ndarray] = field(default=None, repr=False)
    rho: float = 0.0
    _lmax: list = field(default_factory=list, repr=False)

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.P_dense is not None:
            return self.P_dense @ v
        return self.B.T @ (self.B @ v) + self.shift * v

    def solve(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.P_dense is not None:
            return solve_upper(self.woodbury_chol, solve_lower(self.woodbury_chol, v), trans=True)
        Bv = self.B @ v
        z = solve_upper(self.woodbury_chol, solve_lower(self.woodbury_chol, Bv), trans=True)
        return (v - self.B.T @ z) / self.shift

    def lambda_max_info(self):
        if not self._lmax:
            res = power_iteration(
                self.apply, self.p, tol=LAMBDA_MAX_TOL, max_iter=LAMBDA_MAX_ITERS, seed=self.seed
            )
            self._lmax.append((max(res.value, self.shift), res.converged))
        return self._lmax[0]

    def lambda_max(self):
        return self.lambda_max_info()[0]


@dataclass(frozen=True, eq=False)
class NyssnPreconditioner(Preconditioner):
    """``P = V diag(lam) V^T + shift * I`` with orthonormal ``V`` (``p x r``)."""

    V: np.ndarray
    lam: np.ndarray
    shift: float
    built_at: Optional[int] = None
    rho: float = 0.0

    @property
    def p(self) -> int:
        return self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.V.shape[1]

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        return self.V @ (self.lam * (self.V.T @ v)) + self.shift * v

    def solve(self, v):
        v = np.asarray(v, dtype=np.float64)
        c = self.V.T @ v
        return self.V @ (c / (self.lam + self.shift)) + (v - self.V @ c) / self.shift

    def lambda_max(self):
        return float(self.lam.max(initial=0.0)) + self.shift

    def lambda_max_info(self):
        return self.lambda_max(), True


def default_rho(loss: GlmLoss, w, batch) -> float:
    """``1e-3 * trace(H_S) / p``, the scale-aware default shift."""
    batch = np.asarray(batch, dtype=np.intp)
    d = loss.hessian_weights(w, batch)
    As = loss.A[batch]
    row_sq = np.asarray(As.multiply(As).sum(axis=1)).ravel()
    tr = float(d @ row_sq) / batch.size
    rho = 1e-3 * tr / loss.p
    return rho if rho > 0 else 1e-3


def _auto_rho(trace_rho: float, retained) -> float:
    # a rank-deficient factor leaves the complement to the shift, which must then
    # be on the scale of the smallest retained eigenvalue
    retained = np.asarray(retained)
    retained = retained[retained > 0]
    return max(trace_rho, float(retained.min())) if retained.size else trace_rho


def build_ssn(loss: GlmLoss, w, batch, rho: Optional[float] = None, built_at=None, seed: int = 0) -> SsnPreconditioner:
    """Subsampled Newton preconditioner on the Hessian batch ``batch``.

    ``rho=None`` picks ``1e-3 trace(H_S)/p``, raised to the smallest nonzero
    eigenvalue of ``H_S`` when the batch is smaller than ``p``.
    """
    if rho is not None and not rho > 0:
        raise ValueError("rho must be positive")
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size < 1:
        raise ValueError("Hessian batch must be nonempty")
    B = loss.hessian_factor(w, batch)
    if sp.issparse(B) and B.nnz > 0.25 * B.shape[0] * B.shape[1]:
        B = B.toarray()
    Bd = B.toarray() if sp.issparse(B) else B
    b, p = Bd.shape
    if b < p:
        gram = Bd @ Bd.T
        gram = 0.5 * (gram + gram.T)
        if rho is None:
            rho = _auto_rho(default_rho(loss, w, batch), np.linalg.eigvalsh(gram))
        shift = rho + loss.ridge
        C = cholesky(gram + shift * np.eye(b))
        return SsnPreconditioner(B, shift, C, built_at, seed, rho=rho)
    if rho is None:
        rho = default_rho(loss, w, batch)
    shift = rho + loss.ridge
    Pd = Bd.T @ Bd
    Pd = 0.5 * (Pd + Pd.T) + shift * np.eye(p)
    return SsnPreconditioner(B, shift, cholesky(Pd), built_at, seed, Pd, rho=rho)


class NystromApprox(NamedTuple):
    V: np.ndarray
    lam: np.ndarray


def rand_nys_approx(hvp: Callable[[np.ndarray], np.ndarray], p: int, r: int, seed: int = 0) -> NystromApprox:
    """Randomized Nystrom approximation ``V diag(lam) V^T`` of a PSD operator.

    ``hvp`` maps a ``p x r`` block to its product with the operator. The
    sketch is stabilized by a shift of ``sqrt(p) * eps(sigma_max(M))`` which is
    removed from the returned eigenvalues.
    """
    if not 1 <= r <= p:
        raise ValueError(f"rank must lie in [1, {p}], got {r}")
    rng = np.random.default_rng(seed)
    Omega, _ = np.linalg.qr(rng.standard_normal((p, r)))
    M = np.asarray(hvp(Omega), dtype=np.float64).reshape(p, r)
    if not M.any():
        return NystromApprox(Omega, np.zeros(r))
    smax = float(np.linalg.norm(M, 2))
    shift = math.sqrt(p) * np.spacing(smax)
    for attempt in range(2):
        Mnu = M + shift * Omega
        core = Omega.T @ Mnu
        core = 0.5 * (core + core.T)
        try:
            C = cholesky(core)
            break
        except NotPositiveDefiniteError:
            if attempt:
                raise
            shift *= 10.0
    # B = M_nu C^{-T} so that B B^T = M_nu (Omega^T M_nu)^{-1} M_nu^T
    Bt = solve_lower(C, Mnu.T)
    V, s = thin_svd(Bt.T)
    lam = np.maximum(0.0, s**2 - shift)
    return NystromApprox(V, lam)


def build_nyssn(
    loss: GlmLoss, w, batch, r: int, rho: Optional[float] = None, seed: int = 0, built_at=None
) -> NyssnPreconditioner:
    """Rank-``r`` Nystrom preconditioner of the subsampled Hessian.

    ``rho=None`` uses ``max(1e-3 trace(H_S)/p, smallest nonzero retained eigenvalue)``.
    """
    if rho is not None and not rho > 0:
        raise ValueError("rho must be positive")
    batch = np.asarray(batch, dtype=np.intp)
    As = loss.A[batch]
    d = loss.hessian_weights(w, batch)

    def hvp(X):
        return As.T @ (d[:, None] * (As @ X)) / batch.size

    V, lam = rand_nys_approx(hvp, loss.p, min(r, loss.p), seed)
    if rho is None:
        rho = default_rho(loss, w, batch)
        if V.shape[1] < loss.p:
            rho = _auto_rho(rho, lam)
    return NyssnPreconditioner(V, lam, rho + loss.ridge, built_at, rho=rho)


class SpectralReport(NamedTuple):
    zeta: float
    d_eff: float
    tau: float
    at_rho: float


_SPECTRAL_MAX_P = 400


def _inv_sqrt(S: np.ndarray) -> np.ndarray:
    ev, U = np.linalg.eigh(S)
    return (U / np.sqrt(ev)) @ U.T


def _dissimilarity(loss: GlmLoss, w, Hr: np.ndarray, rho: float) -> float:
    # After whitening by Hr^{-1/2} each sample Hessian d_i a_i a_i^T + (nu + rho) I
    # becomes diag(g) + d_i u u^T in the eigenbasis of Hr, whose top eigenvalue is
    # the root above max(g) of the secular equation 1 = d_i sum_j u_j^2 / (lam - g_j).
    h, Q = np.linalg.eigh(Hr)
    g = (loss.ridge + rho) / h
    U = (loss.A @ Q) / np.sqrt(h)
    d = loss.hessian_weights(w)
    gmax = g.max()
    lo = np.full(loss.n, gmax)
    hi = gmax + d * np.einsum("ij,ij->i", U, U)
    U2 = U**2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        with np.errstate(divide="ignore"):
            f = 1.0 - d * (U2 / (mid[:, None] - g[None, :])).sum(axis=1)
        below = f < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-15 * hi):
            break
    return float(hi.max())


def spectral_report(loss: GlmLoss, w, P: Preconditioner, rho: float) -> SpectralReport:
    """Dense diagnostics of preconditioner quality at ``w`` (small ``p`` only).

    ``H`` below is the full Hessian of the smooth part (ridge included).
    ``zeta`` measures ``P^{-1/2}(H + rho I)P^{-1/2}`` against the identity,
    ``d_eff = tr(H (H + rho I)^{-1})`` and ``tau`` is the rho-Hessian
    dissimilarity over samples.
    """
    p = loss.p
    if p > _SPECTRAL_MAX_P:
        raise ValueError(f"spectral_report is dense; p={p} exceeds {_SPECTRAL_MAX_P}")
    H = loss.hessian_dense(w)
    Hr = H + rho * np.eye(p)
    Pd = P.dense()
    Pd = 0.5 * (Pd + Pd.T)
    Pm = _inv_sqrt(Pd)
    ev = np.linalg.eigvalsh(Pm @ Hr @ Pm)
    zeta = max(ev[-1] - 1.0, 1.0 - ev[0], 0.0)
    d_eff = float(np.trace(np.linalg.solve(Hr, H)))
    tau = _dissimilarity(loss, w, Hr, rho)
    return SpectralReport(float(zeta), d_eff, float(tau), float(rho))
