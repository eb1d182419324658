"""Learning the values of a CountSketch-type sketch by gradient descent.

Positions ``p`` are drawn once at random and never change; only ``v`` is
trained. Gradients come from central finite differences. Both training
losses depend on the sketch only through the sketched Gram matrix
``H = (S A)^T (S A)``, so by default the differences are taken in the
``d(d+1)/2`` entries of ``H`` and pushed to ``v`` with the exact chain rule
``dH/dv_k = a_k c^T + c a_k^T`` (``c`` the sketched row that ``a_k`` lands in).
:func:`grad_values_fd` differentiates ``v`` coordinate by coordinate instead.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .constraints import FREE
from .fastreg import fast_regression_solve
from .ihs import Task, solve_gram, sketched_quadratic_solve
from .sketch import CountSketchType, deserialize_sketch, make_countsketch, serialize_sketch

log = logging.getLogger(__name__)

SENTINEL_LOSS = 1e12
IHS_ROUND = "ihs"
COND_NUMBER = "cond"


@dataclass
class TrainConfig:
    steps: int = 200
    alpha: float = 1e-2
    batch_size: int = 8
    seed: int = 0
    fd_step: float = 1e-4
    loss: str = IHS_ROUND
    gradient: str = "gram"

    def __post_init__(self):
        if self.steps < 0 or not self.alpha >= 0 or not self.fd_step > 0 or self.batch_size < 1:
            raise ValueError(f"invalid training configuration {self}")
        if self.loss not in (IHS_ROUND, COND_NUMBER):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.gradient not in ("gram", "coordinate"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")


@dataclass
class RoundContext:
    """A training instance for one round: the task plus the iterate ``x_t`` it starts from."""

    task: Task
    x_t: np.ndarray

    @property
    def A(self):
        return self.task.A


# --- losses ----------------------------------------------------------------

def _round_objective(task: Task, x_t, x_next) -> float:
    dx = x_next - x_t
    Adx = task.A @ dx
    g = task.A.T @ (task.b - task.A @ x_t)
    return 0.5 * float(np.vdot(Adx, Adx)) - float(np.vdot(g, dx)) + task.constraint.penalty(x_next)


def ihs_round_loss_gram(H, ctx: RoundContext) -> float:
    task, x_t = ctx.task, ctx.x_t
    g = task.A.T @ (task.b - task.A @ x_t)
    try:
        if task.constraint.kind == FREE:
            w = np.linalg.eigvalsh(H)
            if w[0] <= 1e-12 * max(w[-1], 1e-300):
                return SENTINEL_LOSS
            x_next = x_t + np.linalg.solve(H, g)
        else:
            x_next = solve_gram(H, g, x_t, task.constraint, strict=False)
    except np.linalg.LinAlgError:
        return SENTINEL_LOSS
    return _round_objective(task, x_t, x_next)


def loss_ihs_round(S, ctx: RoundContext) -> float:
    """Unsketched round objective at the sketched update ``x_{t+1}``."""
    try:
        x_next = sketched_quadratic_solve(S, ctx.task, ctx.x_t, strict=False)
    except np.linalg.LinAlgError:
        return SENTINEL_LOSS
    return _round_objective(ctx.task, ctx.x_t, x_next)


def cond_loss_gram(H, A) -> float:
    """``kappa(A R^{-1})`` with ``R^T R = H``: square roots of the generalized eigenvalues of ``(A^T A, H)``."""
    try:
        R = np.linalg.cholesky(H).T
    except np.linalg.LinAlgError:
        return SENTINEL_LOSS
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * diag.max():
        return SENTINEL_LOSS
    from scipy.linalg import solve_triangular

    s = np.linalg.svd(solve_triangular(R, np.asarray(A).T, trans="T").T, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else SENTINEL_LOSS


def loss_cond_number(S, A) -> float:
    """Condition number of ``A R^{-1}`` where ``R`` is the QR factor of ``S A``."""
    from scipy.linalg import qr, solve_triangular

    A = np.asarray(A, dtype=np.float64)
    SA = S.apply(A)
    if SA.shape[0] < A.shape[1]:
        return SENTINEL_LOSS
    R = qr(SA, mode="r")[0][: A.shape[1]]
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * diag.max():
        return SENTINEL_LOSS
    s = np.linalg.svd(solve_triangular(R, A.T, trans="T").T, compute_uv=False)
    return float(s[0] / s[-1])


def _loss_for(kind: str):
    if kind == IHS_ROUND:
        return loss_ihs_round, ihs_round_loss_gram, lambda item: item.A
    return loss_cond_number, cond_loss_gram, lambda item: item


# --- gradients -------------------------------------------------------------

def grad_values_fd(loss: Callable, S: CountSketchType, batch: Sequence, fd_step: float = 1e-4):
    """Central differences of the batch-mean loss in each value ``v_i``.

    The perturbation for coordinate ``i`` is ``fd_step * max(1, |v_i|)``. A
    coordinate whose loss evaluation raises gets gradient 0; the number of
    such coordinates is returned alongside the gradient.
    """
    v = S.v
    grad = np.zeros_like(v)
    skipped = 0
    for i in range(v.size):
        h = fd_step * max(1.0, abs(v[i]))
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        Sp, Sm = S.with_values(vp), S.with_values(vm)
        try:
            diffs = [loss(Sp, item) - loss(Sm, item) for item in batch]
        except (np.linalg.LinAlgError, ArithmeticError, ValueError):
            skipped += 1
            continue
        grad[i] = float(np.mean(diffs)) / (2.0 * h)
    if skipped:
        log.warning("finite differences skipped %d coordinates", skipped)
    return grad, skipped


def gram_gradient_fd(gram_loss: Callable, H, item, fd_step: float = 1e-4):
    """Symmetric matrix ``G`` with ``dL = <G, dH>`` for symmetric ``dH``, by central differences."""
    d = H.shape[0]
    h = fd_step * max(1.0, float(np.trace(H)) / d)
    G = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            E = np.zeros((d, d))
            E[i, j] = E[j, i] = h
            dl = (gram_loss(H + E, item) - gram_loss(H - E, item)) / (2.0 * h)
            if i == j:
                G[i, i] = dl
            else:
                G[i, j] = G[j, i] = 0.5 * dl
    return G


def grad_values_gram(gram_loss: Callable, S: CountSketchType, batch: Sequence,
                     matrix_of: Callable, fd_step: float = 1e-4):
    """Batch-mean gradient in ``v`` via differences in the Gram matrix and the exact chain rule."""
    grad = np.zeros(S.n)
    for item in batch:
        A = matrix_of(item)
        SA = S.apply(A)
        G = gram_gradient_fd(gram_loss, SA.T @ SA, item, fd_step)
        # dL/dv_k = 2 a_k^T G c_{p_k}
        grad += 2.0 * np.einsum("ij,ij->i", A @ G, SA[S.p])
    return grad / len(batch)


def batch_loss(loss: Callable, S, batch) -> float:
    # exact summation, so the mean does not depend on batch order
    return math.fsum(loss(S, item) for item in batch) / len(batch)


# --- training --------------------------------------------------------------

@dataclass
class TrainedRound:
    round: int
    sketch: CountSketchType
    loss_trace: list
    config: TrainConfig


@dataclass
class TrainedSketchSequence:
    rounds: list = field(default_factory=list)
    shared_positions: bool = False

    def sketch(self, t: int) -> CountSketchType:
        """Sketch for round ``t`` (1-based); the last one is reused past the end."""
        return self.rounds[min(t, len(self.rounds)) - 1].sketch

    @property
    def sketches(self) -> list:
        return [r.sketch for r in self.rounds]

    def to_json(self) -> dict:
        return {
            "shared_positions": self.shared_positions,
            "rounds": [
                {"round": r.round, "sketch": serialize_sketch(r.sketch),
                 "loss_trace": list(map(float, r.loss_trace)), "config": asdict(r.config)}
                for r in self.rounds
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainedSketchSequence":
        rounds = [TrainedRound(int(r["round"]), deserialize_sketch(r["sketch"]),
                               list(r["loss_trace"]), TrainConfig(**r["config"]))
                  for r in obj["rounds"]]
        if [r.round for r in rounds] != list(range(1, len(rounds) + 1)):
            raise ValueError("round indices must run 1..T")
        if len({(r.sketch.m, r.sketch.n) for r in rounds}) > 1:
            raise ValueError("all rounds must share (m, n)")
        return cls(rounds, bool(obj.get("shared_positions", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TrainedSketchSequence":
        return cls.from_json(json.loads(Path(path).read_text()))


def _batches(N: int, size: int, gen: np.random.Generator):
    """Endless stream of index batches, sampled without replacement within each epoch."""
    size = min(size, N)
    while True:
        order = gen.permutation(N)
        for k in range(0, N - size + 1, size):
            yield order[k:k + size]


def train_sketch(items: Sequence, config: TrainConfig, m: int, rng: np.random.Generator | None = None,
                 init: CountSketchType | None = None, round_index: int = 1) -> TrainedRound:
    """Gradient descent on the sketch values over a training set.

    ``items`` are :class:`RoundContext` objects for the IHS loss and data
    matrices for the condition-number loss. The loss trace holds the mean
    batch loss before each step.
    """
    if not items:
        raise ValueError("empty training set")
    gen = np.random.default_rng(config.seed) if rng is None else rng
    matrix_of = _loss_for(config.loss)[2]
    n = matrix_of(items[0]).shape[0]
    if any(matrix_of(it).shape[0] != n for it in items):
        raise ValueError("training matrices must share the row count n")
    S = make_countsketch(m, n, gen) if init is None else init.copy()
    S.variant = "countsketch-type"
    loss, gram_loss, _ = _loss_for(config.loss)
    trace = []
    batches = _batches(len(items), config.batch_size, gen)
    for _ in range(config.steps):
        batch = [items[i] for i in next(batches)]
        trace.append(batch_loss(loss, S, batch))
        if config.alpha == 0:
            continue
        if config.gradient == "gram":
            grad = grad_values_gram(gram_loss, S, batch, matrix_of, config.fd_step)
        else:
            grad = grad_values_fd(loss, S, batch, config.fd_step)[0]
        if not np.all(np.isfinite(grad)):
            log.warning("non-finite gradient; step skipped")
            continue
        S = S.with_values(S.v - config.alpha * grad)
    return TrainedRound(round_index, S, trace, config)


# --- round data ------------------------------------------------------------

def generate_round_data(tasks: Sequence[Task], sketches: Sequence[CountSketchType], **solve_kw):
    """Contexts for round ``t + 1``: replay the IHS updates with learned sketches ``S_1..S_t``."""
    contexts = []
    for task in tasks:
        x = task.initial_point()
        for S in sketches:
            x = sketched_quadratic_solve(S, task, x, strict=False, **solve_kw)
        contexts.append(RoundContext(task, x))
    return contexts


@dataclass
class NewtonContext:
    """Round data for the fast-regression loss: ``A = (Hessian)^{1/2}`` and ``y = gradient`` at ``x_t``."""

    A: np.ndarray
    y: np.ndarray
    x_t: np.ndarray


def generate_newton_round_data(tasks: Sequence[Task], sketches: Sequence[CountSketchType],
                               rng: np.random.Generator, eps: float = 1e-6, eta_est: float = 0.1):
    """Replay Newton steps solved with the learned sketches; least-squares Hessians do not depend on ``x_t``."""
    out = []
    for task in tasks:
        x = np.zeros(task.d)
        for S in sketches:
            y = task.A.T @ (task.A @ x - task.b)
            x = x - fast_regression_solve(S, None, task.A, y, eps, eta_est, rng).x
        out.append(NewtonContext(task.A, task.A.T @ (task.A @ x - task.b), x))
    return out


def train_sequence(tasks: Sequence[Task], config: TrainConfig, m: int, rounds: int,
                   rng: np.random.Generator | None = None, share_positions: bool = False) -> TrainedSketchSequence:
    """Train round by round; round ``t + 1`` trains on iterates produced by the sketches learned so far."""
    gen = np.random.default_rng(config.seed) if rng is None else rng
    seq = TrainedSketchSequence(shared_positions=share_positions)
    for t in range(1, rounds + 1):
        if config.loss == IHS_ROUND:
            items = generate_round_data(tasks, seq.sketches)
        else:
            items = [task.A for task in tasks]
        init = None
        if share_positions and seq.rounds:
            init = seq.rounds[0].sketch.with_values(make_countsketch(m, tasks[0].n, gen).v)
        seq.rounds.append(train_sketch(items, config, m, gen, init=init, round_index=t))
        log.info("round %d: loss %.6g -> %.6g", t, seq.rounds[-1].loss_trace[0] if seq.rounds[-1].loss_trace else math.nan,
                 seq.rounds[-1].loss_trace[-1] if seq.rounds[-1].loss_trace else math.nan)
    return seq
