"""Iterative Hessian Sketch for constrained and composite least squares.

Each round minimizes the sketched quadratic model

    q(x) = 1/2 ||S A (x - x_t)||^2 - <A^T (b - A x_t), x - x_t>  (+ lam ||x||_1)

over the constraint set. Matrix unknowns (nuclear-ball tasks) use Frobenius
inner products throughout.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular

from .constraints import FREE, L1, NUCLEAR, SIMPLEX, ConstraintSpec, prox_or_project
from .estimate import SpectralEstimates, estimate_z
from .sketch import Sketch, identity_sketch

FISTA_TOL = 1e-10
FISTA_MAX_ITER = 500
REFERENCE_ITERS = 20_000
REFERENCE_TOL = 1e-14


class SolverNotConverged(RuntimeError):
    """Inner solver hit its iteration cap; ``best`` holds the best iterate found."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass
class Task:
    """Least squares ``min 1/2 ||A x - b||^2 + penalty(x)`` over a constraint set.

    ``b`` may be a matrix, in which case the unknown is a matrix too.
    """

    A: np.ndarray
    b: np.ndarray
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    name: str = ""

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.b.ndim not in (1, 2) or self.b.shape[0] != self.A.shape[0]:
            raise ValueError(f"inconsistent shapes A{self.A.shape}, b{self.b.shape}")
        if self.A.shape[0] < self.A.shape[1]:
            raise ValueError("task needs n >= d")
        if (self.constraint.kind == NUCLEAR) != (self.b.ndim == 2):
            raise ValueError("matrix targets go with the nuclear-ball constraint and vice versa")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def x_shape(self) -> tuple:
        return (self.d,) + self.b.shape[1:]

    def objective(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(np.vdot(r, r)) + self.constraint.penalty(x)

    def error(self, x, x_star) -> float:
        """Per-experiment suboptimality metric.

        LASSO and matrix estimation report ``f(x) - f(x*)`` with the half-scaled
        objective; the SVM dual reports ``||Bx||^2 - ||Bx*||^2``.
        """
        gap = self.objective(x) - self.objective(x_star)
        return 2.0 * gap if self.constraint.kind == SIMPLEX else gap

    def initial_point(self) -> np.ndarray:
        x0 = np.zeros(self.x_shape)
        if self.constraint.kind == SIMPLEX:
            x0[:] = 1.0 / self.d
        return x0


def _inner(a, b) -> float:
    return float(np.vdot(a, b))


def solve_gram(H, g, x_t, constraint: ConstraintSpec, *, tol=FISTA_TOL, max_iter=FISTA_MAX_ITER,
               strict=True, lipschitz=None):
    """Minimize ``1/2 <dx, H dx> - <g, dx> + penalty(x)`` over the constraint, ``dx = x - x_t``.

    Accelerated proximal gradient with step ``1/lambda_max(H)`` and
    function-value restarts. Stops once both the relative objective change
    and the relative step fall below ``tol``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    L = float(np.linalg.eigvalsh(H)[-1]) if lipschitz is None else lipschitz
    if not L > 0:
        raise np.linalg.LinAlgError("sketched Hessian is zero")
    step = 1.0 / L

    def F(x):
        dx = x - x_t
        return 0.5 * _inner(dx, H @ dx) - _inner(g, dx) + constraint.penalty(x)

    x = prox_or_project(constraint, x_t, step) if constraint.kind != L1 else x_t.copy()
    fx = F(x)
    y, t = x.copy(), 1.0
    best, fbest = x, fx
    for _ in range(max_iter):
        grad = H @ (y - x_t) - g
        x_new = prox_or_project(constraint, y - step * grad, step)
        f_new = F(x_new)
        if f_new > fx:
            if t == 1.0:
                # a plain prox-gradient step no longer decreases F: converged to rounding
                return best
            # restart momentum from the last accepted point
            y, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        dstep = np.linalg.norm(x_new - x)
        df = fx - f_new
        x, fx, t = x_new, f_new, t_new
        if fx < fbest:
            best, fbest = x, fx
        scale = max(1.0, abs(fx))
        if df <= tol * scale and dstep <= tol * max(1.0, np.linalg.norm(x)):
            return best
    if strict:
        raise SolverNotConverged(f"FISTA did not converge in {max_iter} iterations", best)
    return best


def _free_step(SA, g):
    """Exact minimizer ``dx`` of ``1/2 ||SA dx||^2 - <g, dx>``."""
    Q, R = np.linalg.qr(SA)
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() > 1e-12 * diag.max():
        w = solve_triangular(R, g, trans="T")
        return solve_triangular(R, w)
    return np.linalg.pinv(SA.T @ SA) @ g


def sketched_quadratic_solve(S: Sketch, task: Task, x_t, *, g=None, tol=FISTA_TOL,
                             max_iter=FISTA_MAX_ITER, strict=True):
    """One IHS update with sketch ``S``.

    ``g`` overrides the linear term ``A^T (b - A x_t)``; with ``x_t = 0`` and
    ``g = A^T y`` this is the Hessian sketch problem.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    SA = S.apply(task.A)
    if g is None:
        g = task.A.T @ (task.b - task.A @ x_t)
    if task.constraint.kind == FREE:
        return x_t + _free_step(SA, g)
    return solve_gram(SA.T @ SA, g, x_t, task.constraint, tol=tol, max_iter=max_iter, strict=strict)


def hessian_sketch_solve(S: Sketch, task: Task, y=None, **kw):
    """Solve ``min 1/2 ||S A x||^2 - <A^T y, x>`` over the task's constraint (``y`` defaults to ``b``)."""
    y = task.b if y is None else np.asarray(y, dtype=np.float64)
    return sketched_quadratic_solve(S, task, np.zeros(task.x_shape), g=task.A.T @ y, **kw)


def reference_solution(task: Task) -> np.ndarray:
    """High-accuracy solution of the full problem (identity-sketch subproblem)."""
    if task.constraint.kind == FREE:
        return np.linalg.lstsq(task.A, task.b, rcond=None)[0]
    H = task.A.T @ task.A
    x0 = task.initial_point()
    g = task.A.T @ (task.b - task.A @ x0)
    return solve_gram(H, g, x0, task.constraint, tol=REFERENCE_TOL,
                      max_iter=REFERENCE_ITERS, strict=False)


@dataclass
class Selection:
    x: np.ndarray
    chosen: str
    learned: SpectralEstimates
    random: SpectralEstimates


def hessian_sketch_select(S_learned: Sketch, S_random: Sketch, task: Task, eta: float,
                          rng: np.random.Generator, y=None, **estimate_kw) -> Selection:
    """Solve the Hessian sketch problem with whichever sketch has the smaller estimated ``Z2/Z1``.

    Ties go to the learned sketch.
    """
    S, chosen, est_l, est_r = choose_sketch(S_learned, S_random, task.A, eta, rng, **estimate_kw)
    return Selection(hessian_sketch_solve(S, task, y), chosen, est_l, est_r)


def choose_sketch(S_learned: Sketch, S_random: Sketch, A, eta: float, rng: np.random.Generator,
                  **estimate_kw):
    """Return ``(sketch, tag, learned estimates, random estimates)`` for the smaller ``Z2/Z1`` estimate."""
    est_l = estimate_z(S_learned, A, eta, rng, **estimate_kw)
    est_r = estimate_z(S_random, A, eta, rng, **estimate_kw)
    if est_l.ratio <= est_r.ratio:
        return S_learned, "learned", est_l, est_r
    return S_random, "random", est_l, est_r


SketchProvider = Union[Sketch, Sequence[Sketch], Callable[[int], Sketch]]


def _provider_fn(provider: SketchProvider) -> Callable[[int], Sketch]:
    if isinstance(provider, Sketch):
        return lambda t: provider
    if callable(provider):
        return provider
    seq = list(provider)
    return lambda t: seq[min(t, len(seq)) - 1]


@dataclass
class IHSState:
    round: int
    x: np.ndarray
    errors: list = field(default_factory=list)
    times_ms: list = field(default_factory=list)
    sketches: list = field(default_factory=list)


def run_ihs(task: Task, provider: SketchProvider, rounds: int, x0=None, x_star=None,
            **solve_kw) -> IHSState:
    """Iterate the sketched update for ``rounds`` rounds from ``x0``.

    ``provider`` is a fixed sketch (reused every round), a sequence of
    per-round sketches, or a callable ``t -> sketch`` with ``t`` starting at 1.
    Times cover the sketch application and subproblem solve only.
    """
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    x = task.initial_point() if x0 is None else np.array(x0, dtype=np.float64)
    if task.constraint.is_hard:
        x = prox_or_project(task.constraint, x, 1.0)
    state = IHSState(0, x)
    if rounds == 0:
        return state
    if x_star is None:
        x_star = reference_solution(task)
    get = _provider_fn(provider)
    for t in range(1, rounds + 1):
        S = get(t)
        start = time.perf_counter()
        x = sketched_quadratic_solve(S, task, x, **solve_kw)
        state.times_ms.append(1e3 * (time.perf_counter() - start))
        state.errors.append(task.error(x, x_star))
        state.sketches.append(getattr(S, "variant", type(S).__name__))
        state.round, state.x = t, x
    return state


def build_svm_dual(A, z, C: float) -> Task:
    """Dual of the squared-hinge SVM: ``min ||B x||^2`` over the simplex, ``B = [A D; I / sqrt(C)]``.

    ``A`` holds one sample per column; ``z`` are the +-1 labels.
    """
    A = np.asarray(A, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if A.ndim != 2 or z.shape != (A.shape[1],):
        raise ValueError("need one label per column of A")
    if not np.all(np.isin(z, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    if not C > 0:
        raise ValueError("C must be positive")
    d = A.shape[1]
    B = np.vstack([A * z, np.eye(d) / np.sqrt(C)])
    return Task(B, np.zeros(B.shape[0]), ConstraintSpec(SIMPLEX))


__all__ = [
    "Task", "IHSState", "Selection", "SolverNotConverged", "solve_gram",
    "sketched_quadratic_solve", "hessian_sketch_solve", "hessian_sketch_select",
    "choose_sketch", "reference_solution", "run_ihs", "build_svm_dual", "identity_sketch",
]
