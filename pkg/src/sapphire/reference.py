"""High-accuracy reference solutions for measuring suboptimality.

A reference is computed in two phases that share no code with the
stochastic solvers:

1. full-gradient FISTA to get close to the solution and its support;
2. an active-set Newton polish on ``{j : w_j != 0}`` with fixed signs that
   adds coordinates violating the optimality conditions and drops
   coordinates that cross zero, until the gradient mapping vanishes to
   rounding level.

Only the convex penalties (``none`` and ``l1``) are supported.

Results can be cached on disk. A cache file is one JSON header line
followed by one line of base64-encoded little-endian float64 coefficients.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .linalg import power_iteration
from .losses import GlmLoss
from .regularizers import L1, NoPenalty, Regularizer
from .solver import gradient_mapping_norm, objective

__all__ = ["ReferenceSolution", "problem_key", "read_reference", "reference_solution", "write_reference"]

CACHE_FORMAT = "sapphire-reference/1"


class ReferenceSolution(NamedTuple):
    w: np.ndarray
    objective: float
    grad_map_norm: float
    newton_iters: int


def problem_key(loss: GlmLoss, reg: Regularizer) -> str:
    h = hashlib.sha256()
    A = loss.A
    for arr in (A.indptr, A.indices, A.data, loss.y):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([loss.kind, loss.ridge, list(A.shape), type(reg).__name__, reg.params()]).encode())
    return h.hexdigest()[:32]


def write_reference(path, ref: ReferenceSolution, key: str) -> None:
    header = {
        "format": CACHE_FORMAT,
        "key": key,
        "length": int(ref.w.size),
        "dtype": "<f8",
        "objective": ref.objective,
        "grad_map_norm": ref.grad_map_norm,
        "newton_iters": ref.newton_iters,
    }
    payload = base64.b64encode(np.asarray(ref.w, dtype="<f8").tobytes()).decode("ascii")
    Path(path).write_text(json.dumps(header, sort_keys=True) + "\n" + payload + "\n")


def read_reference(path) -> tuple[dict, ReferenceSolution]:
    header_line, payload = Path(path).read_text().splitlines()[:2]
    header = json.loads(header_line)
    if header.get("format") != CACHE_FORMAT:
        raise ValueError(f"{path}: not a reference cache file")
    w = np.frombuffer(base64.b64decode(payload), dtype="<f8").astype(np.float64)
    if w.size != header["length"]:
        raise ValueError(f"{path}: payload length {w.size} != {header['length']}")
    ref = ReferenceSolution(w, header["objective"], header["grad_map_norm"], header["newton_iters"])
    return header, ref


def _fista(loss: GlmLoss, reg: Regularizer, w, iters: int) -> np.ndarray:
    L = power_iteration(lambda v: loss.subsampled_hvp(w, np.arange(loss.n), v), loss.p, tol=1e-6, max_iter=500).value
    if loss.kind == "logistic":
        # logistic curvature is at most 1/4 everywhere; the Hessian at w may be flatter
        L = max(L, power_iteration(lambda v: 0.25 * (loss.A.T @ (loss.A @ v)) / loss.n + loss.ridge * v,
                                   loss.p, tol=1e-6, max_iter=500).value)
    t = 1.0 / (1.01 * L)
    x = y = w.copy()
    s = 1.0
    for _ in range(iters):
        x_new = reg.prox(y - t * loss.full_gradient(y), t)
        s_new = 0.5 * (1 + math.sqrt(1 + 4 * s * s))
        y = x_new + ((s - 1) / s_new) * (x_new - x)
        x, s = x_new, s_new
    return x


def _polish(loss: GlmLoss, reg: Regularizer, w, max_iter: int) -> tuple[np.ndarray, int]:
    lam = reg.lam if isinstance(reg, L1) else 0.0
    p = loss.p
    w = w.copy()
    F = objective(loss, reg, w)
    it = 0
    for it in range(1, max_iter + 1):
        g = loss.full_gradient(w)
        active = w != 0.0 if lam > 0 else np.ones(p, dtype=bool)
        sign = np.sign(w)
        if lam > 0:
            viol = (~active) & (np.abs(g) > lam * (1 + 1e-12))
            active |= viol
            sign[viol] = -np.sign(g[viol])
        S = np.flatnonzero(active)
        if S.size == 0:
            break
        grad_S = g[S] + lam * sign[S]
        H = loss.hessian_dense(w)[np.ix_(S, S)]
        try:
            d = -np.linalg.solve(H, grad_S)
        except np.linalg.LinAlgError:
            d = -np.linalg.lstsq(H, grad_S, rcond=None)[0]
        # coordinates crossing zero stop there and drop out next round
        t_max, first = 1.0, None
        if lam > 0:
            wS = w[S]
            crossing = (wS != 0) & (np.sign(wS + d) != sign[S])
            if crossing.any():
                ratios = np.full(S.size, np.inf)
                ratios[crossing] = -wS[crossing] / d[crossing]
                first = int(np.argmin(ratios))
                t_max = min(1.0, float(ratios[first]))
        t = t_max
        improved = False
        for _ in range(60):
            cand = w.copy()
            cand[S] = w[S] + t * d
            if lam > 0:
                if first is not None and t == t_max:
                    cand[S[first]] = 0.0
                cand[S] = np.where(np.sign(cand[S]) == -sign[S], 0.0, cand[S])
            F_new = objective(loss, reg, cand)
            if F_new <= F:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        step = np.linalg.norm(cand - w)
        w, F = cand, F_new
        if step <= 1e-15 * max(1.0, np.linalg.norm(w)) and gradient_mapping_norm(loss, reg, w) <= 1e-13:
            break
    return w, it


def reference_solution(
    loss: GlmLoss,
    reg: Regularizer,
    w0=None,
    fista_iters: int = 3000,
    max_newton: int = 200,
    cache_dir=None,
) -> ReferenceSolution:
    """Near machine-precision minimizer of ``loss + reg`` (convex penalties only)."""
    if not isinstance(reg, (L1, NoPenalty)):
        raise NotImplementedError("reference solutions are only available for convex penalties")
    key = problem_key(loss, reg)
    cache: Optional[Path] = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"reference-{key}.txt"
        if cache.exists():
            header, ref = read_reference(cache)
            if header["key"] == key:
                return ref
    w = np.zeros(loss.p) if w0 is None else np.array(w0, dtype=np.float64)
    w = _fista(loss, reg, w, fista_iters)
    w, its = _polish(loss, reg, w, max_newton)
    ref = ReferenceSolution(w, objective(loss, reg, w), gradient_mapping_norm(loss, reg, w), its)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        write_reference(cache, ref, key)
    return ref
