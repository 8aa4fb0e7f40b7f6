"""Preconditioned variance-reduced outer/inner loop and first-order baselines.

``sapphire_run`` alternates a full gradient at the snapshot with ``m``
inner steps. Each inner step forms the variance-reduced gradient
``v = g_S(w) - g_S(w_snap) + g(w_snap)`` on one shared minibatch ``S`` and
moves by the scaled prox in the preconditioner metric. With the identity
preconditioner this is exactly proximal SVRG.

Effective passes count per-sample gradient evaluations divided by ``n``: a
stage costs ``n + 2 m b_g`` evaluations plus ``b_H`` per preconditioner build.
Step-size estimation and trace diagnostics are not counted.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .linalg import power_iteration
from .losses import GlmLoss, sample_batch
from .precond import (
    IdentityPreconditioner,
    Preconditioner,
    build_nyssn,
    build_ssn,
)
from .prox_solver import ScaledProxProblem, scaled_prox
from .regularizers import Regularizer, support

__all__ = [
    "SolverConfig",
    "SolverDivergedError",
    "SolverResult",
    "StepLog",
    "Suboptimality",
    "TraceRecord",
    "compute_suboptimality",
    "estimate_eta",
    "gradient_mapping_norm",
    "objective",
    "prox_svrg_run",
    "saga_run",
    "sapphire_run",
    "variance_reduced_gradient",
]

PRECOND_KINDS = ("ssn", "nyssn", "identity")
SNAPSHOT_OPTIONS = ("last", "average")
#: fallback preconditioner quality assumed when the smoothness estimate fails
ZETA_ASSUMED = 1.0
STALL_RTOL = 1e-14


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of the stochastic solvers.

    ``None`` entries are resolved from the problem size by :meth:`resolve`:
    ``b_g = b_h = ceil(sqrt(n))`` and ``m = ceil(2 n / b_g)``. ``rho=None``
    lets each build pick its shift (see :func:`~sapphire.precond.build_ssn`
    and :func:`~sapphire.precond.build_nyssn`).

    The preconditioner is rebuilt at the start of each of the first
    ``warmup_stages`` stages and every ``update_every`` stages afterwards.
    """

    b_g: Optional[int] = None
    b_h: Optional[int] = None
    rank: int = 50
    rho: Optional[float] = None
    alpha: float = 0.5
    eta: Optional[float] = None
    m: Optional[int] = None
    update_every: int = 5
    warmup_stages: int = 3
    snapshot: str = "last"
    precond: str = "ssn"
    apg_tol: float = 1e-10
    apg_t_max: int = 500
    apg_restart: bool = True
    strict_paper: bool = False
    seed: int = 0
    max_passes: float = 200.0
    max_seconds: float = math.inf
    tol: float = 0.0
    stall_stages: int = 5
    record_steps: bool = False

    def __post_init__(self):
        if self.precond not in PRECOND_KINDS:
            raise ValueError(f"precond must be one of {PRECOND_KINDS}")
        if self.snapshot not in SNAPSHOT_OPTIONS:
            raise ValueError(f"snapshot must be one of {SNAPSHOT_OPTIONS}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")
        if self.update_every < 1 or self.warmup_stages < 0:
            raise ValueError("update_every must be >= 1 and warmup_stages >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.max_passes > 0 or not self.max_seconds > 0:
            raise ValueError("budget must be positive")

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)

    def resolve(self, n: int) -> "SolverConfig":
        b_g = self.b_g if self.b_g is not None else math.ceil(math.sqrt(n))
        b_h = self.b_h if self.b_h is not None else math.ceil(math.sqrt(n))
        if not 1 <= b_g <= n:
            raise ValueError(f"b_g must lie in [1, {n}], got {b_g}")
        if not 1 <= b_h <= n:
            raise ValueError(f"b_h must lie in [1, {n}], got {b_h}")
        m = self.m if self.m is not None else math.ceil(2 * n / b_g)
        return self.replace(b_g=b_g, b_h=b_h, m=m)

    def rebuild_at(self, stage: int) -> bool:
        if stage < self.warmup_stages:
            return True
        return (stage - self.warmup_stages) % self.update_every == 0


@dataclass(frozen=True)
class TraceRecord:
    stage: int
    effective_passes: float
    wall_seconds: float
    objective: float
    grad_map_norm: float
    support_size: int
    apg_iters_total: int
    eta: float = math.nan
    precond_builds: int = 0


class StepLog(NamedTuple):
    stage: int
    k: int
    w: np.ndarray
    w_snapshot: np.ndarray
    full_grad: np.ndarray
    batch: np.ndarray
    v: np.ndarray


@dataclass
class SolverResult:
    w_final: np.ndarray
    trace: List[TraceRecord]
    termination: str
    config: Optional[SolverConfig] = None
    steps: List[StepLog] = field(default_factory=list, repr=False)

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.trace])

    def passes(self) -> np.ndarray:
        return np.array([r.effective_passes for r in self.trace])


class SolverDivergedError(FloatingPointError):
    """The objective became non-finite; ``result`` holds the trace so far."""

    def __init__(self, message: str, result: SolverResult):
        super().__init__(message)
        self.result = result


class Suboptimality(NamedTuple):
    absolute: float
    relative: float
    clipped: bool


def objective(loss: GlmLoss, reg: Regularizer, w) -> float:
    return loss.value(w) + reg.value(w)


def gradient_mapping_norm(loss: GlmLoss, reg: Regularizer, w, g=None) -> float:
    """``||w - prox_r(w - grad L(w))||`` at unit step."""
    g = loss.full_gradient(w) if g is None else g
    return float(np.linalg.norm(w - reg.prox(w - g, 1.0)))


def compute_suboptimality(loss: GlmLoss, reg: Regularizer, w, reference) -> Suboptimality:
    """Gap ``R(w) - R(ref)`` and relative error ``gap / |R(ref)|``; negatives clip to 0."""
    best = reference if np.isscalar(reference) else objective(loss, reg, reference)
    gap = objective(loss, reg, w) - best
    clipped = gap < 0
    gap = max(gap, 0.0)
    rel = gap / abs(best) if best != 0 else gap
    return Suboptimality(gap, rel, clipped)


def variance_reduced_gradient(loss: GlmLoss, w, w_snap, full_grad, batch) -> np.ndarray:
    g = loss.minibatch_gradient(w, batch).vector
    g_snap = loss.minibatch_gradient(w_snap, batch).vector
    return g - g_snap + full_grad


def estimate_eta(
    loss: GlmLoss,
    P: Preconditioner,
    w,
    cfg: SolverConfig,
    batch=None,
    rho: float = 0.0,
) -> float:
    """Step ``alpha / L_hat`` with ``L_hat`` the top eigenvalue of ``P^{-1}(H_S + rho I)``.

    ``H_S`` is the subsampled Hessian (ridge included) on ``batch``; the
    generalized power iteration runs in the ``P`` inner product.
    """
    if batch is None:
        batch = np.arange(loss.n)
    rho = 0.0 if P.is_identity else rho

    def op(v):
        return P.solve(loss.subsampled_hvp(w, batch, v) + rho * v)

    res = power_iteration(op, loss.p, tol=1e-4, max_iter=200, seed=cfg.seed, metric=P.apply)
    L_hat = res.value
    if not (math.isfinite(L_hat) and L_hat > 0):
        return cfg.alpha / (1.0 + ZETA_ASSUMED)
    return cfg.alpha / L_hat


def _build_preconditioner(loss, w, batch, cfg: SolverConfig, stage: int, seed: int):
    if cfg.precond == "ssn":
        return build_ssn(loss, w, batch, cfg.rho, built_at=stage, seed=seed)
    return build_nyssn(loss, w, batch, cfg.rank, cfg.rho, seed=seed, built_at=stage)


class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0


def _stalled(objs: List[float], window: int) -> bool:
    if len(objs) <= window:
        return False
    best_before = min(objs[: -window])
    return all(best_before - o <= STALL_RTOL * abs(best_before) for o in objs[-window:])


def sapphire_run(
    loss: GlmLoss,
    reg: Regularizer,
    cfg: SolverConfig = SolverConfig(),
    w0=None,
    callback: Optional[Callable[[TraceRecord, np.ndarray], Optional[bool]]] = None,
) -> SolverResult:
    """Run the preconditioned proximal SVRG method until the budget is spent."""
    n, p = loss.n, loss.p
    cfg = cfg.resolve(n)
    rng = np.random.default_rng(cfg.seed)
    clock = _Clock()
    w_snap = np.zeros(p) if w0 is None else np.array(w0, dtype=np.float64)
    samples = 0
    apg_total = 0
    builds = 0
    P: Preconditioner = IdentityPreconditioner(p)
    eta = cfg.eta if cfg.eta is not None else math.nan
    rho = cfg.rho
    steps: List[StepLog] = []

    def record(stage, g=None):
        obj = objective(loss, reg, w_snap)
        rec = TraceRecord(
            stage,
            samples / n,
            clock(),
            obj,
            gradient_mapping_norm(loss, reg, w_snap, g) if math.isfinite(obj) else math.nan,
            int(support(w_snap).size),
            apg_total,
            eta,
            builds,
        )
        trace.append(rec)
        return rec

    trace: List[TraceRecord] = []
    record(0)
    termination = "budget"
    stage = 0
    while True:
        if cfg.precond == "identity":
            if stage == 0 and cfg.eta is None:
                eta = estimate_eta(loss, P, w_snap, cfg, sample_batch(rng, n, cfg.b_g))
        elif cfg.rebuild_at(stage):
            batch_h = sample_batch(rng, n, cfg.b_h)
            P = _build_preconditioner(loss, w_snap, batch_h, cfg, stage, cfg.seed + stage)
            rho = P.rho
            samples += cfg.b_h
            builds += 1
            if cfg.eta is None:
                eta = estimate_eta(loss, P, w_snap, cfg, sample_batch(rng, n, cfg.b_g), rho)
        g_bar = loss.full_gradient(w_snap)
        samples += n
        w = w_snap
        w_sum = np.zeros(p)
        for k in range(cfg.m):
            batch = sample_batch(rng, n, cfg.b_g)
            v = variance_reduced_gradient(loss, w, w_snap, g_bar, batch)
            samples += 2 * cfg.b_g
            if cfg.record_steps:
                steps.append(StepLog(stage, k, w, w_snap, g_bar, batch, v))
            prob = ScaledProxProblem(P, reg, w, v, eta, rho or 0.0)
            res = scaled_prox(
                prob, cfg.apg_tol, cfg.apg_t_max, restart=cfg.apg_restart, strict=cfg.strict_paper
            )
            apg_total += res.iterations
            w = res.solution
            w_sum += w
        w_snap = w_sum / cfg.m if cfg.snapshot == "average" else w
        stage += 1
        rec = record(stage)
        if not math.isfinite(rec.objective):
            raise SolverDivergedError(
                f"objective became non-finite at stage {stage}",
                SolverResult(w_snap, trace, "diverged", cfg, steps),
            )
        if (cfg.tol > 0 and rec.grad_map_norm <= cfg.tol) or (callback is not None and callback(rec, w_snap)):
            termination = "tolerance"
            break
        if _stalled([r.objective for r in trace], cfg.stall_stages):
            termination = "stall"
            break
        if rec.effective_passes >= cfg.max_passes or rec.wall_seconds >= cfg.max_seconds:
            break
    return SolverResult(w_snap, trace, termination, cfg, steps)


def prox_svrg_run(loss: GlmLoss, reg: Regularizer, cfg: SolverConfig = SolverConfig(), w0=None, callback=None):
    """Proximal SVRG: the same loop with the identity preconditioner."""
    return sapphire_run(loss, reg, cfg.replace(precond="identity"), w0, callback)


def saga_run(
    loss: GlmLoss,
    reg: Regularizer,
    cfg: SolverConfig = SolverConfig(),
    w0=None,
    callback=None,
    check_table: bool = False,
) -> SolverResult:
    """Proximal SAGA storing one scalar derivative per sample.

    The gradient table starts at zero, so the first step is a proximal SGD
    step. Step size defaults to ``1 / (3 L_max)``; the trace is recorded
    every ``n`` steps.
    """
    n, p = loss.n, loss.p
    A = loss.A
    y = loss.y
    nu = loss.ridge
    indptr, indices, data = A.indptr, A.indices, A.data
    rng = np.random.default_rng(cfg.seed)
    eta = cfg.eta if cfg.eta is not None else 1.0 / (3.0 * loss.max_sample_smoothness())
    reg.check_step(eta)
    clock = _Clock()
    w = np.zeros(p) if w0 is None else np.array(w0, dtype=np.float64)
    table = np.zeros(n)
    mean = np.zeros(p)
    steps_done = 0
    trace: List[TraceRecord] = []

    def record(stage):
        obj = objective(loss, reg, w)
        rec = TraceRecord(
            stage,
            steps_done / n,
            clock(),
            obj,
            gradient_mapping_norm(loss, reg, w) if math.isfinite(obj) else math.nan,
            int(support(w).size),
            0,
            eta,
            0,
        )
        trace.append(rec)
        return rec

    record(0)
    termination = "budget"
    stage = 0
    dphi = loss.dphi
    while True:
        picks = rng.integers(0, n, size=n)
        for j in picks:
            lo, hi = indptr[j], indptr[j + 1]
            idx, val = indices[lo:hi], data[lo:hi]
            z = val @ w[idx]
            g_new = float(dphi(z, y[j]))
            delta = g_new - table[j]
            v = mean + nu * w
            v[idx] += delta * val
            mean[idx] += (delta / n) * val
            table[j] = g_new
            w = reg.prox(w - eta * v, eta)
            steps_done += 1
        if check_table:
            expected = A.T @ table / n
            if not np.allclose(mean, expected, rtol=0.0, atol=1e-10):
                raise AssertionError("SAGA running mean drifted from its table")
        stage += 1
        rec = record(stage)
        if not math.isfinite(rec.objective):
            raise SolverDivergedError(
                f"objective became non-finite at epoch {stage}", SolverResult(w, trace, "diverged", cfg)
            )
        if (cfg.tol > 0 and rec.grad_map_norm <= cfg.tol) or (callback is not None and callback(rec, w)):
            termination = "tolerance"
            break
        if _stalled([r.objective for r in trace], cfg.stall_stages):
            termination = "stall"
            break
        if rec.effective_passes >= cfg.max_passes or rec.wall_seconds >= cfg.max_seconds:
            break
    return SolverResult(w, trace, termination, cfg)
