"""Scaled proximal mapping in the metric of a preconditioner.

Solves::

    min_w  eta * r(w) + eta * <v, w - w_k> + 0.5 * ||w - w_k||_P^2

with accelerated proximal gradient (FISTA momentum) and function-value
restart. The smooth part is ``lambda_max(P)``-smooth, so the step is
``1 / lambda_max(P)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .precond import UNCONVERGED_STEP_FACTOR, Preconditioner
from .regularizers import Regularizer

__all__ = ["ApgResult", "ScaledProxProblem", "momentum_sequence", "scaled_prox", "subproblem_objective"]


@dataclass(frozen=True, eq=False)
class ScaledProxProblem:
    P: Preconditioner
    reg: Regularizer
    w_k: np.ndarray
    v_k: np.ndarray
    eta: float
    rho: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")


class ApgResult(NamedTuple):
    solution: np.ndarray
    iterations: int
    fixed_point_residual: float
    converged: bool


def momentum_sequence(count: int) -> np.ndarray:
    """First ``count`` terms of ``s_0 = 1, s_{t+1} = (1 + sqrt(1 + 4 s_t^2)) / 2``."""
    s = np.empty(count)
    s[0] = 1.0
    for t in range(1, count):
        s[t] = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * s[t - 1] ** 2))
    return s


def subproblem_objective(prob: ScaledProxProblem, x) -> float:
    d = np.asarray(x) - prob.w_k
    return float(prob.eta * prob.reg.value(x) + prob.eta * (prob.v_k @ d) + 0.5 * (d @ prob.P.apply(d)))


def _objective_change(prob, x_new, x, Pd_new, Pd) -> float:
    # every term is proportional to the step, so tiny changes keep their sign
    step = x_new - x
    return prob.eta * (prob.reg.value_change(x_new, x) + prob.v_k @ step) + 0.5 * (step @ (Pd_new + Pd))


def scaled_prox(
    prob: ScaledProxProblem,
    tol: float = 1e-8,
    t_max: int = 500,
    x0: Optional[np.ndarray] = None,
    restart: bool = True,
    strict: bool = False,
) -> ApgResult:
    """Evaluate the scaled prox by APG, warm-started at ``x0`` (default ``w_k``).

    ``strict`` reproduces the printed variant: step ``1/(lambda_max + rho)``,
    metric gradient taken at ``x_t`` rather than the extrapolated point, and
    no restart.
    """
    if not tol > 0 or t_max < 1:
        raise ValueError("need tol > 0 and t_max >= 1")
    P, reg, w_k, eta = prob.P, prob.reg, prob.w_k, prob.eta
    ev = eta * prob.v_k

    if P.is_identity:
        x = reg.prox(w_k - ev, eta)
        return ApgResult(x, 1, 0.0, True)

    lmax, lmax_ok = P.lambda_max_info()
    if strict:
        alpha = 1.0 / (lmax + prob.rho)
        restart = False
    else:
        alpha = 1.0 / lmax
    if not lmax_ok:
        alpha *= UNCONVERGED_STEP_FACTOR
    step = alpha * eta
    reg.check_step(step)

    x = np.array(w_k if x0 is None else x0, dtype=np.float64)
    d = x - w_k
    Pd = P.apply(d)
    y, Py = x, Pd
    s = 1.0
    converged = False
    just_restarted = False
    t = 0
    for t in range(1, t_max + 1):
        grad = ev + (Pd if strict else Py)
        x_new = reg.prox(y - alpha * grad, step)
        if not np.all(np.isfinite(x_new)):
            raise FloatingPointError("non-finite APG iterate; step size or prox regime is off")
        d_new = x_new - w_k
        Pd_new = P.apply(d_new)
        if restart and _objective_change(prob, x_new, x, Pd_new, Pd) > 0.0:
            if just_restarted:
                converged = True
                break
            # reject the step and restart momentum from the current iterate
            y, Py, s = x, Pd, 1.0
            just_restarted = True
            continue
        just_restarted = False
        s_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * s * s))
        beta = (s - 1.0) / s_new
        step_norm = np.linalg.norm(x_new - x)
        y = x_new + beta * (x_new - x)
        Py = Pd_new + beta * (Pd_new - Pd)
        x, d, Pd, s = x_new, d_new, Pd_new, s_new
        if step_norm <= tol * max(1.0, np.linalg.norm(x)):
            converged = True
            break
    fp = reg.prox(x - alpha * (ev + Pd), step)
    return ApgResult(x, t, float(np.linalg.norm(fp - x)), converged)
