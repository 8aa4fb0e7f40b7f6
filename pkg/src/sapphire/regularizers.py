"""Non-smooth penalties with coordinatewise proximal operators.

The non-convex penalties (SCAD, MCP) are only proxed at steps where the 1-D
prox subproblem has a unique minimizer: ``t < a - 1`` for SCAD and ``t < gamma``
for MCP. Their prox evaluates the stationary point of every branch and keeps
the candidate with the lowest objective (ties go to the smaller magnitude).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "L1",
    "MCP",
    "SCAD",
    "NoPenalty",
    "ProxRegimeError",
    "Regularizer",
    "make_regularizer",
    "soft_threshold",
    "support",
]


class ProxRegimeError(ValueError):
    """Prox step outside the range where the minimizer is unique."""


def soft_threshold(x, thresh):
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def support(w, tol: float = 0.0) -> np.ndarray:
    """Indices with ``|w_j| > tol``."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return np.flatnonzero(np.abs(np.asarray(w)) > tol)


class Regularizer:
    """Base class: ``penalty`` is coordinatewise and summed by ``value``."""

    convex = True
    max_step = math.inf

    def penalty(self, w) -> np.ndarray:
        raise NotImplementedError

    def value(self, w) -> float:
        return float(np.sum(self.penalty(np.asarray(w, dtype=np.float64))))

    def value_change(self, new, old) -> float:
        """``value(new) - value(old)`` without cancellation in the totals."""
        return float(np.sum(self.penalty(np.asarray(new, dtype=np.float64)) - self.penalty(np.asarray(old, dtype=np.float64))))

    def _prox(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def check_step(self, t: float) -> None:
        if not t > 0:
            raise ValueError(f"prox step must be positive, got {t}")
        if not t < self.max_step:
            raise ProxRegimeError(
                f"{type(self).__name__} prox needs step < {self.max_step}, got {t}"
            )

    def prox(self, x, t: float) -> np.ndarray:
        """``argmin_u t * penalty(u) + 0.5 (u - x)^2``, coordinatewise."""
        self.check_step(t)
        return self._prox(np.asarray(x, dtype=np.float64), float(t))

    def prox_objective(self, u, x, t: float) -> np.ndarray:
        return t * self.penalty(u) + 0.5 * (u - x) ** 2

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class NoPenalty(Regularizer):
    def penalty(self, w):
        return np.zeros_like(np.asarray(w, dtype=np.float64))

    def value_change(self, new, old):
        return 0.0

    def _prox(self, x, t):
        return x.copy()


@dataclass(frozen=True)
class L1(Regularizer):
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    def penalty(self, w):
        return self.lam * np.abs(w)

    def value_change(self, new, old):
        return self.lam * float(np.sum(np.abs(new) - np.abs(old)))

    def _prox(self, x, t):
        return soft_threshold(x, t * self.lam)

    def params(self):
        return {"lam": self.lam}


def _pick_branch(reg: Regularizer, ax: np.ndarray, t: float, candidates) -> np.ndarray:
    # candidates ordered by increasing magnitude so argmin breaks ties toward smaller |u|
    C = np.stack(candidates)
    obj = reg.prox_objective(C, ax[None, :], t)
    return C[np.argmin(obj, axis=0), np.arange(ax.size)]


@dataclass(frozen=True)
class SCAD(Regularizer):
    lam: float
    a: float = 3.7
    convex = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.a > 2:
            raise ValueError("SCAD needs a > 2")

    @property
    def max_step(self):
        return self.a - 1.0

    def penalty(self, w):
        lam, a = self.lam, self.a
        aw = np.abs(w)
        mid = -(aw**2 - 2 * a * lam * aw + lam**2) / (2 * (a - 1))
        return np.where(aw <= lam, lam * aw, np.where(aw < a * lam, mid, (a + 1) * lam**2 / 2))

    def _prox(self, x, t):
        lam, a = self.lam, self.a
        ax = np.abs(x).ravel()
        u1 = np.clip(ax - t * lam, 0.0, lam)
        u2 = np.clip(((a - 1) * ax - t * a * lam) / (a - 1 - t), lam, a * lam)
        u3 = np.maximum(ax, a * lam)
        u = _pick_branch(self, ax, t, (u1, u2, u3))
        return (np.sign(x).ravel() * u).reshape(x.shape)

    def params(self):
        return {"lam": self.lam, "a": self.a}


@dataclass(frozen=True)
class MCP(Regularizer):
    lam: float
    gamma: float = 3.0
    convex = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.gamma > 1:
            raise ValueError("MCP needs gamma > 1")

    @property
    def max_step(self):
        return self.gamma

    def penalty(self, w):
        lam, g = self.lam, self.gamma
        aw = np.abs(w)
        return np.where(aw <= g * lam, lam * aw - aw**2 / (2 * g), g * lam**2 / 2)

    def _prox(self, x, t):
        lam, g = self.lam, self.gamma
        ax = np.abs(x).ravel()
        u1 = np.clip(g * (ax - t * lam) / (g - t), 0.0, g * lam)
        u2 = np.maximum(ax, g * lam)
        u = _pick_branch(self, ax, t, (u1, u2))
        return (np.sign(x).ravel() * u).reshape(x.shape)

    def params(self):
        return {"lam": self.lam, "gamma": self.gamma}


def make_regularizer(kind: str, **params) -> Regularizer:
    """Build a regularizer from a kind name (``none``, ``l1``, ``scad``, ``mcp``)."""
    kinds = {"none": NoPenalty, "l1": L1, "scad": SCAD, "mcp": MCP}
    try:
        cls = kinds[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown regularizer {kind!r}") from None
    return cls(**params)
