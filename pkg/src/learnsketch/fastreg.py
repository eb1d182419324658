"""Sketch-preconditioned solver for ``min_z ||A^T A z - y||`` and a Newton driver for least squares."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .estimate import EigEstimates, RankDeficientError, eig_via_sketch
from .sketch import Sketch

RICHARDSON = "richardson"
VERBATIM = "verbatim"


class IterationCapExceeded(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class Preconditioner:
    """``P = R^{-1}`` from the QR of ``S A`` plus singular-value estimates of ``A P``."""

    R: np.ndarray
    P: np.ndarray
    eig: EigEstimates
    step: float
    source: str

    @property
    def kappa(self) -> float:
        return self.eig.kappa


def build_preconditioner(S: Sketch, A, eta_est: float, rng: np.random.Generator, *,
                         source: str = "random", step_scale: float = 1.0, c: float = 20.0,
                         T: Sketch | None = None) -> Preconditioner:
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[1]
    SA = S.apply(A)
    if SA.shape[0] < d:
        raise RankDeficientError("sketch has fewer rows than columns of A")
    R = qr(SA, mode="r")[0][:d]
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * diag.max():
        raise RankDeficientError("S A is rank deficient")
    P = solve_triangular(R, np.eye(d))
    eig = eig_via_sketch(A, P, eta_est, rng, c=c, T=T)
    step = step_scale / (eig.sigma_max**2 + eig.sigma_min**2)
    return Preconditioner(R, P, eig, step, source)


def identity_preconditioner(A, step: float) -> Preconditioner:
    """Test hook: ``P = I`` with a caller-chosen step."""
    d = np.asarray(A).shape[1]
    s = np.linalg.svd(A, compute_uv=False)
    return Preconditioner(np.eye(d), np.eye(d), EigEstimates(float(s[0]), float(s[-1])), step, "identity")


@dataclass
class FastRegResult:
    x: np.ndarray
    iterations: int
    chosen: str
    residuals: list = field(default_factory=list)
    kappa_learned: float = math.nan
    kappa_random: float = math.nan


def _iterate(A, y, pre: Preconditioner, eps: float, max_iter: int, update: str):
    P, step = pre.P, pre.step
    ynorm = np.linalg.norm(y)
    Pty = P.T @ y
    z = np.zeros(P.shape[1])

    def hess(w):
        # P^T A^T A P w as nested products; A^T A is never formed
        return P.T @ (A.T @ (A @ (P @ w)))

    residuals = []
    for it in range(max_iter + 1):
        AtAPz = A.T @ (A @ (P @ z))
        res = np.linalg.norm(AtAPz - y)
        residuals.append(res / ynorm)
        if res < eps * ynorm:
            return P @ z, it, residuals
        if not np.isfinite(res):
            raise IterationCapExceeded(f"iteration diverged after {it} steps; reduce the step size", residuals)
        if it == max_iter:
            break
        r = P.T @ AtAPz - Pty
        z = z - step * (hess(r) if update == VERBATIM else r)
    raise IterationCapExceeded(f"no convergence within {max_iter} iterations", residuals)


def iteration_cap(kappa_hat: float, kappa_A: float, eps: float, power: int = 2) -> int:
    """``10 kappa_hat^power ln(kappa(A) / eps) + 1000``; the verbatim update needs ``power=4``."""
    return int(10 * kappa_hat**power * math.log(max(kappa_A, 1.0 + 1e-12) / eps)) + 1000


def fast_regression_solve(S_learned: Sketch | None, S_random: Sketch | None, A, y, eps: float,
                          eta_est: float, rng: np.random.Generator, *, step_scale: float = 1.0,
                          update: str = RICHARDSON, max_iter: int | None = None,
                          preconditioner: Preconditioner | None = None) -> FastRegResult:
    """Solve ``A^T A x = y`` to relative residual ``eps`` with the better of two sketch preconditioners.

    The preconditioner with the smaller estimated ``kappa(A P)`` is used (ties
    go to the learned one). Either sketch may be None. If neither yields a
    full-rank ``S A``, the normal equations are solved densely and the result
    is tagged ``fallback``.

    ``update='richardson'`` iterates ``z <- z - step (P^T A^T A P z - P^T y)``;
    ``update='verbatim'`` applies the extra ``P^T A^T A P`` factor, i.e.
    gradient descent on ``1/2 ||P^T A^T A P z - P^T y||^2``.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if update not in (RICHARDSON, VERBATIM):
        raise ValueError(f"unknown update {update!r}")
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.any(y):
        return FastRegResult(np.zeros(A.shape[1]), 0, "zero", [0.0])

    pres = {}
    if preconditioner is not None:
        pres[preconditioner.source] = preconditioner
    else:
        for tag, S in (("learned", S_learned), ("random", S_random)):
            if S is None:
                continue
            try:
                pres[tag] = build_preconditioner(S, A, eta_est, rng, source=tag, step_scale=step_scale)
            except RankDeficientError:
                pass
    if not pres:
        x = np.linalg.solve(A.T @ A, y)
        return FastRegResult(x, 0, "fallback", [np.linalg.norm(A.T @ (A @ x) - y) / np.linalg.norm(y)])

    chosen = min(pres, key=lambda k: (pres[k].kappa, k != "learned"))
    pre = pres[chosen]
    if max_iter is None:
        s = np.linalg.svd(pre.R, compute_uv=False)
        max_iter = iteration_cap(pre.kappa, s[0] / s[-1], eps, 2 if update == RICHARDSON else 4)
    x, its, residuals = _iterate(A, y, pre, eps, max_iter, update)
    out = FastRegResult(x, its, chosen, residuals)
    out.kappa_learned = pres["learned"].kappa if "learned" in pres else math.nan
    out.kappa_random = pres["random"].kappa if "random" in pres else math.nan
    return out


@dataclass
class NewtonTrace:
    iterates: list = field(default_factory=list)
    calls: list = field(default_factory=list)


def newton_driver(A, b, sketch_provider, rounds: int, eps: float, rng: np.random.Generator, *,
                  x0=None, eta_est: float = 0.1, step_scale=1.0, update: str = RICHARDSON) -> NewtonTrace:
    """Newton's method on ``1/2 ||A x - b||^2`` with sketch-preconditioned inner solves.

    ``sketch_provider(t)`` returns ``(S_learned, S_random)`` for round ``t``
    (1-based); either entry may be None. ``step_scale`` may be a callable of
    ``t`` for per-round overrides.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=np.float64)
    trace = NewtonTrace([x.copy()])
    for t in range(1, rounds + 1):
        S_l, S_r = sketch_provider(t)
        scale = step_scale(t) if callable(step_scale) else step_scale
        y = A.T @ (A @ x - b)
        res = fast_regression_solve(S_l, S_r, A, y, eps, eta_est, rng, step_scale=scale, update=update)
        x = x - res.x
        trace.iterates.append(x.copy())
        trace.calls.append(res)
    return trace
