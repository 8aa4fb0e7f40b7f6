"""Smooth GLM part of the objective: ``(1/n) sum phi(a_i^T w, y_i) + (nu/2)||w||^2``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .data import Dataset

__all__ = ["GlmLoss", "GradientEstimate", "sample_batch"]


class GradientEstimate(NamedTuple):
    vector: np.ndarray
    batch_indices: np.ndarray
    is_full: bool


def sample_batch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """Uniform sample of ``size`` distinct indices from ``range(n)``, sorted.

    Partial Fisher-Yates shuffle driven by ``rng``.
    """
    if not 1 <= size <= n:
        raise ValueError(f"batch size must lie in [1, {n}], got {size}")
    if size == n:
        return np.arange(n)
    pool = np.arange(n)
    draws = rng.integers(np.arange(size), n)
    for i, j in enumerate(draws):
        pool[i], pool[j] = pool[j], pool[i]
    return np.sort(pool[:size])


@dataclass(frozen=True)
class GlmLoss:
    """Average of per-sample GLM losses plus a ridge term.

    Parameters
    ----------
    kind : {"squared", "logistic"}
        ``squared`` is ``0.5 (z - y)^2``; ``logistic`` is ``log(1 + exp(-y z))``
        and expects labels in {-1, +1}.
    dataset : Dataset
    ridge : float
        Coefficient ``nu`` of ``(nu/2)||w||^2``.
    """

    kind: str
    dataset: Dataset
    ridge: float = 0.0

    def __post_init__(self):
        if self.kind not in ("squared", "logistic"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.ridge >= 0.0:
            raise ValueError("ridge must be nonnegative")
        if self.kind == "logistic" and self.dataset.kind != "binary":
            raise ValueError("logistic loss needs a binary (+/-1) dataset")

    @property
    def A(self):
        return self.dataset.features

    @property
    def y(self) -> np.ndarray:
        return self.dataset.labels

    @property
    def n(self) -> int:
        return self.dataset.n_samples

    @property
    def p(self) -> int:
        return self.dataset.n_features

    # scalar links, vectorized over samples

    def phi(self, z, y):
        if self.kind == "squared":
            return 0.5 * (z - y) ** 2
        return np.logaddexp(0.0, -y * z)

    def dphi(self, z, y):
        if self.kind == "squared":
            return z - y
        return -y * expit(-y * z)

    def d2phi(self, z, y):
        if self.kind == "squared":
            return np.ones_like(z)
        return expit(z) * expit(-z)

    def _rows(self, batch):
        return self.A if batch is None else self.A[batch]

    def margins(self, w, batch=None) -> np.ndarray:
        return self._rows(batch) @ w

    def value(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        z = self.A @ w
        return float(np.mean(self.phi(z, self.y)) + 0.5 * self.ridge * (w @ w))

    def full_gradient(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        z = self.A @ w
        return self.A.T @ self.dphi(z, self.y) / self.n + self.ridge * w

    def minibatch_gradient(self, w, batch) -> GradientEstimate:
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            raise ValueError("empty batch")
        As = self.A[batch]
        g = As.T @ self.dphi(As @ w, self.y[batch]) / batch.size + self.ridge * w
        return GradientEstimate(g, batch, batch.size == self.n and np.unique(batch).size == self.n)

    def sample_gradient(self, w, i: int) -> np.ndarray:
        return self.minibatch_gradient(w, [i]).vector

    def hessian_weights(self, w, batch=None) -> np.ndarray:
        """Second derivatives ``phi''(a_i^T w, y_i)`` over ``batch``."""
        z = self.margins(w, batch)
        y = self.y if batch is None else self.y[batch]
        return self.d2phi(z, y)

    def hessian_factor(self, w, batch) -> "np.ndarray | object":
        """Rows ``sqrt(d_i / b) a_i`` whose Gram matrix is the subsampled data Hessian."""
        batch = np.asarray(batch, dtype=np.intp)
        d = self.hessian_weights(w, batch)
        As = self.A[batch]
        return As.multiply(np.sqrt(d / batch.size)[:, None]).tocsr()

    def subsampled_hvp(self, w, batch, v) -> np.ndarray:
        """``(1/b) A_S^T diag(d) A_S v + nu v``."""
        batch = np.asarray(batch, dtype=np.intp)
        As = self.A[batch]
        d = self.d2phi(As @ w, self.y[batch])
        return As.T @ (d * (As @ v)) / batch.size + self.ridge * np.asarray(v)

    def hessian_dense(self, w, batch=None) -> np.ndarray:
        """Dense ``(1/b) A_S^T D A_S + nu I``; test/diagnostic use only."""
        As = self._rows(batch)
        b = As.shape[0]
        d = self.hessian_weights(w, batch)
        Ad = As.toarray()
        return (Ad.T * d) @ Ad / b + self.ridge * np.eye(self.p)

    def max_sample_smoothness(self) -> float:
        """Upper bound on the smoothness constant of any single sample loss."""
        row_sq = np.asarray(self.A.multiply(self.A).sum(axis=1)).ravel()
        curv = 1.0 if self.kind == "squared" else 0.25
        return float(curv * row_sq.max(initial=0.0) + self.ridge)
