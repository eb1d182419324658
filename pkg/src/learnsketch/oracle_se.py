"""Subspace embeddings that keep large-leverage rows exactly and CountSketch the rest."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_io import ExperimentRecord, format_extra, gen_leverage_dataset  # noqa: F401
from .estimate import leverage_scores, numerical_rank, orthonormal_basis
from .sketch import OracleSplitSketch, Sketch, make_countsketch

RESIDUAL = "residual"
EXCESS = "excess"
TOTAL = "total"
EXTRA = "extra"


def large_leverage_set(A, nu: float) -> np.ndarray:
    """Indices (0-based, sorted) of rows with leverage score at least ``nu``."""
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    return np.flatnonzero(leverage_scores(A) >= nu)


def top_leverage_set(A, k: int) -> np.ndarray:
    """The ``k`` rows of largest leverage score, sorted by index."""
    tau = leverage_scores(A)
    k = min(max(k, 0), tau.size)
    return np.sort(np.argsort(-tau, kind="stable")[:k])


def make_oracle_sketch(A_or_n, index, m: int, rng: np.random.Generator) -> OracleSplitSketch:
    """Identity on rows ``index`` and a fresh ``m``-row CountSketch on the remaining rows."""
    n = A_or_n if isinstance(A_or_n, (int, np.integer)) else np.asarray(A_or_n).shape[0]
    index = np.unique(np.asarray(index, dtype=np.int64))
    rest = n - index.size
    inner = make_countsketch(m, rest, rng) if rest > 0 else None
    return OracleSplitSketch(n, index, inner)


def embedding_distortion(S: Sketch, A) -> float:
    """Exact worst-case ``eps``: ``||(S U)^T (S U) - I||_op`` for an orthonormal basis ``U``."""
    U = orthonormal_basis(A)
    SU = S.apply(U)
    return float(np.max(np.abs(np.linalg.eigvalsh(SU.T @ SU - np.eye(U.shape[1])))))


def norm_distortion(S: Sketch, A) -> float:
    """Smallest ``eps`` with ``||S A x|| = (1 +- eps) ||A x||`` for all ``x``: ``max |sigma_i(S U) - 1|``."""
    U = orthonormal_basis(A)
    s = np.linalg.svd(S.apply(U), compute_uv=False)
    s = np.pad(s, (0, max(0, U.shape[1] - s.size)))
    return float(np.max(np.abs(s - 1.0)))


def oracle_parameters(d: int, eps: float, delta: float, const: float = 1.0) -> tuple[float, int]:
    """Threshold ``nu = eps / d`` and inner sketch size ``const * d / eps^2 * (log(d/eps)^2 + log(1/delta))``.

    Only the growth rates are known; ``const`` absorbs the constants and the
    polylog factor is taken as ``log^2``.
    """
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ValueError("eps and delta must lie in (0, 1)")
    nu = eps / d
    m = const * d / eps**2 * (math.log(d / eps) ** 2 + math.log(1 / delta))
    return nu, int(math.ceil(m))


def pinv(M, rcond: float = 1e-10) -> np.ndarray:
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def sketch_solve_error(S: Sketch, A, b, metric: str = RESIDUAL) -> float:
    """``||A (S A)^+ S b - b||``; with ``metric='excess'`` the optimal residual is subtracted."""
    A = np.asarray(A, dtype=np.float64)
    SA = S.apply(A)
    if numerical_rank(np.linalg.svd(SA, compute_uv=False)) < A.shape[1]:
        raise np.linalg.LinAlgError("S A is rank deficient")
    x = pinv(SA) @ S.apply(b)
    err = float(np.linalg.norm(A @ x - b))
    if metric == EXCESS:
        x_opt = np.linalg.lstsq(A, b, rcond=None)[0]
        err -= float(np.linalg.norm(A @ x_opt - b))
    return err


def oracle_split(m: int, d: int, budget: str = TOTAL) -> tuple[int, int]:
    """``(identity rows, CountSketch rows)`` for an oracle of the top ``m/5`` rows.

    ``total`` keeps the overall row count at ``m``; ``extra`` adds the
    identity rows on top of an ``m``-row CountSketch.
    """
    if budget == TOTAL:
        k = min(m // 5, m - d)
        return k, m - k
    if budget == EXTRA:
        return m // 5, m
    raise ValueError(f"unknown budget accounting {budget!r}")


@dataclass
class Table1Summary:
    m: int
    with_oracle: bool
    mean_error: float
    failed: int
    records: list


def table1_experiment(tasks, m_list, with_oracle: bool, trials: int, rng: np.random.Generator, *,
                      budget: str = TOTAL, metric: str = RESIDUAL, dataset: str = "synthetic") -> list[Table1Summary]:
    """Sketch-and-solve least squares with plain or oracle-split CountSketch, averaged over trials and tasks.

    Rank-deficient ``S A`` draws are counted as failures and left out of the mean.
    """
    tasks = list(tasks)
    d = tasks[0].d
    if any(t.A.shape != tasks[0].A.shape for t in tasks):
        raise ValueError("tasks must share (n, d)")
    tau = [leverage_scores(t.A) for t in tasks] if with_oracle else None
    out = []
    for m in m_list:
        if m < d:
            raise ValueError(f"m = {m} is smaller than d = {d}")
        k, inner = oracle_split(m, d, budget) if with_oracle else (0, m)
        records, errors, failed = [], [], 0
        for trial in range(trials):
            for j, task in enumerate(tasks):
                if with_oracle:
                    index = np.sort(np.argsort(-tau[j], kind="stable")[:k])
                    S = make_oracle_sketch(task.n, index, inner, rng)
                else:
                    S = make_countsketch(m, task.n, rng)
                try:
                    err = sketch_solve_error(S, task.A, task.b, metric)
                except np.linalg.LinAlgError:
                    failed += 1
                    continue
                errors.append(err)
                records.append(ExperimentRecord(
                    "oracle-se", dataset, "oracle-countsketch" if with_oracle else "countsketch",
                    m, 0, trial, err, 0.0,
                    format_extra(task=task.name or j, identity_rows=k, sketch_rows=inner,
                                 budget=budget if with_oracle else "none", metric=metric)))
        mean = float(np.mean(errors)) if errors else math.nan
        out.append(Table1Summary(m, with_oracle, mean, failed, records))
    return out
