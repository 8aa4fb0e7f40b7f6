"""Oracle-backed property suites behind ``sapphire-bench selftest``.

Every oracle here is written from the defining formulas and shares no code
with the routine it checks:

* prox: grid search then golden-section refinement of the 1-D prox
  objective, with each comparison done through the exact difference
  ``f(c) - f(d) = (c - d) f'((c + d)/2)`` of a piecewise quadratic;
* Nystrom: dense eigendecomposition of an explicit SPD matrix;
* APG: ``10^5`` unaccelerated proximal-gradient steps, batched over problems;
* variance reduction: enumeration of every minibatch.
"""

from __future__ import annotations

import itertools
import math
import time
from typing import Callable, List, NamedTuple

import numpy as np

from .data import make_synthetic
from .losses import GlmLoss
from .precond import DensePreconditioner, rand_nys_approx
from .prox_solver import ScaledProxProblem, scaled_prox
from .regularizers import L1, make_regularizer
from .solver import variance_reduced_gradient

__all__ = [
    "SuiteResult",
    "apg_suite",
    "nystrom_suite",
    "pg_oracle",
    "prox_oracle",
    "prox_suite",
    "run_selftest",
    "unbiasedness_suite",
]


class SuiteResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float


# -- prox oracle ---------------------------------------------------------------


def _penalty(kind: str, prm: dict, u):
    lam = prm["lam"]
    if kind == "l1":
        return lam * u
    if kind == "scad":
        a = prm["a"]
        mid = -(u * u - 2 * a * lam * u + lam * lam) / (2 * (a - 1))
        return np.where(u <= lam, lam * u, np.where(u < a * lam, mid, (a + 1) * lam * lam / 2))
    if kind == "mcp":
        g = prm["gamma"]
        return np.where(u <= g * lam, lam * u - u * u / (2 * g), g * lam * lam / 2)
    raise ValueError(kind)


def _slope(kind: str, prm: dict, u):
    # right derivative of the penalty on u >= 0
    lam = prm["lam"]
    if kind == "l1":
        return np.full_like(u, lam)
    if kind == "scad":
        a = prm["a"]
        return np.where(u <= lam, lam, np.maximum(a * lam - u, 0.0) / (a - 1))
    if kind == "mcp":
        return np.maximum(lam - u / prm["gamma"], 0.0)
    raise ValueError(kind)


def prox_oracle(kind: str, prm: dict, x, t, grid: int = 2001, iters: int = 120) -> np.ndarray:
    """Coordinatewise 1-D minimization of ``t pen(u) + (u - x)^2 / 2``.

    The penalties are even and nondecreasing in ``|u|``, so the minimizer
    shares the sign of ``x``; the search runs over ``|u| in [0, |x| + 1]``.
    ``t`` may be a scalar or an array matching ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape)
    hi = ax + 1.0
    G = np.linspace(0.0, 1.0, grid)[None, :] * hi[:, None]
    F = t[:, None] * _penalty(kind, prm, G) + 0.5 * (G - ax[:, None]) ** 2
    best = G[np.arange(x.size), F.argmin(axis=1)]
    h = hi / (grid - 1)
    lo, up = np.maximum(0.0, best - h), best + h
    r = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(iters):
        c = up - r * (up - lo)
        d = lo + r * (up - lo)
        m = 0.5 * (c + d)
        keep_left = (c - d) * (t * _slope(kind, prm, m) + m - ax) <= 0.0
        up = np.where(keep_left, d, up)
        lo = np.where(keep_left, lo, c)
    return np.sign(x) * 0.5 * (lo + up)


def prox_suite(samples: int = 10_000, seed: int = 0, tol: float = 1e-8) -> SuiteResult:
    """Closed-form prox against the 1-D oracle for l1, SCAD and MCP."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {}
    for kind, extra, bound in (("l1", {}, 5.0), ("scad", {"a": 3.7}, 2.7), ("mcp", {"gamma": 3.0}, 3.0)):
        err = 0.0
        # 100 (lambda, t) draws with samples // 100 points each
        per = max(1, samples // 100)
        for _ in range(100):
            prm = {"lam": float(rng.uniform(0.1, 2.0)), **extra}
            t = float(rng.uniform(0.01, 0.99 * bound))
            x = rng.uniform(-5.0, 5.0, per)
            got = make_regularizer(kind, **prm).prox(x, t)
            err = max(err, float(np.abs(got - prox_oracle(kind, prm, x, t)).max()))
        worst[kind] = err
    ok = all(e <= tol for e in worst.values())
    detail = ", ".join(f"{k} max err {e:.1e}" for k, e in worst.items())
    return SuiteResult("prox", ok, detail, time.perf_counter() - start)


# -- Nystrom ---------------------------------------------------------------------


def nystrom_suite(operators: int = 20, p: int = 200, rank: int = 50, seed: int = 0) -> SuiteResult:
    """Loewner and orthonormality checks of the randomized Nystrom factors.

    Operators have eigenvalues ``j^-2``. At ``rank < p`` the approximation
    must satisfy ``0 <= lam``, ``V^T V = I`` and ``H - V L V^T >= -1e-8 I``;
    at ``rank = p`` the spectrum is recovered to 1e-7. The worst ratio
    ``||H - V L V^T|| / lambda_{r+1}`` is reported, not asserted.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    eig = np.arange(1, p + 1, dtype=np.float64) ** -2.0
    fails: List[str] = []
    worst_loewner = worst_orth = worst_spec = worst_band = 0.0
    for i in range(operators):
        Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
        H = (Q * eig) @ Q.T
        H = 0.5 * (H + H.T)
        for r in (rank, p):
            V, lam = rand_nys_approx(lambda X: H @ X, p, r, seed=seed + i)
            orth = float(np.abs(V.T @ V - np.eye(r)).max())
            resid = np.linalg.eigvalsh(H - (V * lam) @ V.T)
            worst_orth = max(worst_orth, orth)
            worst_loewner = min(worst_loewner, float(resid[0]))
            if lam.min() < 0 or orth > 1e-8 or resid[0] < -1e-8:
                fails.append(f"op {i} r={r}")
            if r < p:
                worst_band = max(worst_band, float(np.abs(resid).max() / eig[r]))
            if r == p:
                dev = float(np.abs(np.sort(lam)[::-1] - eig).max())
                worst_spec = max(worst_spec, dev)
                if dev > 1e-7:
                    fails.append(f"op {i} spectrum")
    detail = (
        f"min eig(H - approx) {worst_loewner:.1e}, orthonormality {worst_orth:.1e}, "
        f"full-rank spectrum err {worst_spec:.1e}, rank-{rank} error / lambda_{rank + 1} {worst_band:.1f}"
    )
    if fails:
        detail += "; failed: " + ", ".join(fails[:5])
    return SuiteResult("nystrom", not fails, detail, time.perf_counter() - start)


# -- APG -------------------------------------------------------------------------


def _random_subproblems(count: int, p: int, rng: np.random.Generator, cond: float = 100.0):
    probs = []
    for _ in range(count):
        Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
        P = (Q * np.geomspace(cond, 1.0, p)) @ Q.T
        P = 0.5 * (P + P.T)
        probs.append(
            ScaledProxProblem(
                DensePreconditioner(P),
                L1(float(rng.uniform(0.1, 1.0))),
                rng.standard_normal(p),
                rng.standard_normal(p),
                float(rng.uniform(0.1, 1.0)),
            )
        )
    return probs


def pg_oracle(probs, steps: int = 100_000) -> np.ndarray:
    """Plain proximal gradient on each l1 subproblem, all advanced together."""
    P = np.stack([pr.P.dense() for pr in probs])
    L = np.linalg.eigvalsh(P)[:, -1][:, None]
    W = np.stack([pr.w_k for pr in probs])
    EV = np.stack([pr.eta * pr.v_k for pr in probs])
    thresh = np.array([pr.eta * pr.reg.lam for pr in probs])[:, None] / L
    X = W.copy()
    for _ in range(steps):
        Z = X - (EV + np.einsum("kij,kj->ki", P, X - W)) / L
        X = np.sign(Z) * np.maximum(np.abs(Z) - thresh, 0.0)
    return X


def apg_suite(problems: int = 50, p: int = 50, steps: int = 100_000, seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    """APG at tol 1e-12 against the long-run proximal-gradient oracle."""
    start = time.perf_counter()
    probs = _random_subproblems(problems, p, np.random.default_rng(seed))
    ref = pg_oracle(probs, steps)
    errs = np.array([np.linalg.norm(scaled_prox(pr, tol=1e-12, t_max=20_000).solution - ref[i]) for i, pr in enumerate(probs)])
    ok = bool(errs.max() <= tol)
    return SuiteResult("apg", ok, f"max ||x_apg - x_oracle|| {errs.max():.1e}", time.perf_counter() - start)


# -- variance reduction ----------------------------------------------------------


def unbiasedness_suite(n: int = 10, p: int = 5, b_g: int = 2, seed: int = 0) -> SuiteResult:
    """Average of ``v`` over all ``C(n, b_g)`` batches equals the full gradient."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    prob = make_synthetic(n, p, 10.0, p, 0.1, "logistic", seed=seed)
    loss = GlmLoss("logistic", prob.dataset, 1e-2)
    w, w_snap = rng.standard_normal(p), rng.standard_normal(p)
    g_bar = loss.full_gradient(w_snap)
    batches = list(itertools.combinations(range(n), b_g))
    mean = np.mean([variance_reduced_gradient(loss, w, w_snap, g_bar, np.array(b)) for b in batches], axis=0)
    bias = float(np.abs(mean - loss.full_gradient(w)).max())
    exact = all(
        np.array_equal(variance_reduced_gradient(loss, w_snap, w_snap, g_bar, np.array(b)), g_bar) for b in batches
    )
    ok = bias <= 1e-12 and exact
    detail = f"{len(batches)} batches, max bias {bias:.1e}, snapshot exact: {exact}"
    return SuiteResult("unbiasedness", ok, detail, time.perf_counter() - start)


SUITES: List[Callable[[], SuiteResult]] = [prox_suite, nystrom_suite, apg_suite, unbiasedness_suite]


def run_selftest(suites=None, out=print) -> List[SuiteResult]:
    results = []
    for suite in suites or SUITES:
        try:
            res = suite()
        except Exception as exc:  # a crashing suite is a failing suite
            res = SuiteResult(getattr(suite, "__name__", "suite"), False, f"error: {exc!r}", 0.0)
        out(f"{'PASS' if res.passed else 'FAIL'}  {res.name:<13} {res.detail} ({res.seconds:.1f}s)")
        results.append(res)
    return results
