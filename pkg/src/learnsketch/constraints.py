"""Constraint sets and regularizers for the sketched subproblems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FREE = "free"
L1 = "l1"
SIMPLEX = "simplex"
NUCLEAR = "nuclear"


@dataclass(frozen=True)
class ConstraintSpec:
    """One of ``free``, ``l1`` (penalty ``lam * ||x||_1``), ``simplex`` or ``nuclear`` (ball of radius ``rho``)."""

    kind: str = FREE
    lam: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in (FREE, L1, SIMPLEX, NUCLEAR):
            raise ValueError(f"unknown constraint {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.kind == NUCLEAR and not self.rho > 0:
            raise ValueError("rho must be positive")

    @property
    def is_hard(self) -> bool:
        return self.kind in (SIMPLEX, NUCLEAR)

    def check_shape(self, x: np.ndarray) -> None:
        if self.kind == NUCLEAR:
            if x.ndim != 2:
                raise ValueError("nuclear-ball constraint applies to matrices")
        elif x.ndim != 1:
            raise ValueError(f"{self.kind} constraint applies to vectors")

    def penalty(self, x: np.ndarray) -> float:
        return self.lam * float(np.abs(x).sum()) if self.kind == L1 else 0.0

    def to_config(self) -> dict:
        cfg = {"constraint": self.kind}
        if self.kind == L1:
            cfg["lambda"] = self.lam
        if self.kind == NUCLEAR:
            cfg["rho"] = self.rho
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "ConstraintSpec":
        kind = cfg.get("constraint", FREE)
        return cls(kind, lam=float(cfg.get("lambda", 0.0)), rho=float(cfg.get("rho", 1.0)))


def prox_l1(x, threshold):
    """Soft thresholding ``sign(x) * max(|x| - threshold, 0)``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def project_simplex(x, radius=1.0):
    """Euclidean projection onto ``{w >= 0, sum(w) = radius}`` by sort and threshold."""
    x = np.asarray(x, dtype=np.float64)
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - radius
    k = np.arange(1, x.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(x - theta, 0.0)


def project_nuclear_ball(X, rho):
    """Projection onto ``{X : ||X||_* <= rho}`` by projecting the singular values onto the l1 ball."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    X = np.asarray(X, dtype=np.float64)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if s.sum() <= rho:
        return X.copy()
    # singular values are nonnegative, so the l1-ball projection lands on the scaled simplex
    s = project_simplex(s, rho)
    return (U * s) @ Vt


def prox_or_project(spec: ConstraintSpec, point, step: float):
    point = np.asarray(point, dtype=np.float64)
    spec.check_shape(point)
    if spec.kind == FREE:
        return point.copy()
    if spec.kind == L1:
        return prox_l1(point, spec.lam * step)
    if spec.kind == SIMPLEX:
        return project_simplex(point)
    return project_nuclear_ball(point, spec.rho)
