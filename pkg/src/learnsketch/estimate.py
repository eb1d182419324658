"""Spectral estimators: leverage scores, sketch quality (Z1, Z2), and extreme singular values.

``Z1(S) = min ||S U x||`` and ``Z2(S) = ||U^T (S^T S - I) U||_op`` over unit ``x``,
with ``U`` an orthonormal basis for the column space of ``A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular

from .sketch import Sketch, make_countsketch

RANK_TOL = 1e-10


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class SpectralEstimates:
    z1_hat: float
    z2_hat: float
    eta: float
    succeeded: bool = True

    @property
    def ratio(self) -> float:
        # a rank-deficient sketch must lose any comparison
        if self.z1_hat <= 0:
            return math.inf
        return self.z2_hat / self.z1_hat


@dataclass
class EigEstimates:
    sigma_max: float
    sigma_min: float

    @property
    def kappa(self) -> float:
        return self.sigma_max / self.sigma_min if self.sigma_min > 0 else math.inf


def numerical_rank(s: np.ndarray) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_TOL * s[0]))


def orthonormal_basis(A: np.ndarray) -> np.ndarray:
    """Thin Q factor of ``A``; raises if ``A`` is rank deficient."""
    A = np.asarray(A, dtype=np.float64)
    Q, R = np.linalg.qr(A)
    if numerical_rank(np.linalg.svd(R, compute_uv=False)) < A.shape[1]:
        raise RankDeficientError("matrix does not have full column rank")
    return Q


def leverage_scores(A) -> np.ndarray:
    """Squared row norms of an orthonormal basis of ``colspace(A)``."""
    Q = orthonormal_basis(A)
    return np.einsum("ij,ij->i", Q, Q)


def sketch_rows(d: int, eta: float, c: float) -> int:
    return int(math.ceil(c * d * d / (eta * eta)))


def _r_factor(A: np.ndarray, eta: float, rng, c: float, T: Sketch | None):
    """R factor of ``T A`` for a sparse (1 +- eta) embedding T.

    Falls back to the exact QR of ``A`` when the embedding would not be
    smaller than ``A``. Returns ``(R, used_sketch)``.
    """
    n, d = A.shape
    if T is None:
        mT = sketch_rows(d, eta, c)
        if mT >= n:
            return qr(A, mode="r")[0][:d], False
        T = make_countsketch(mT, n, rng)
    R = qr(T.apply(A), mode="r")[0][:d]
    return R, True


def _rank_ok(R: np.ndarray) -> bool:
    diag = np.abs(np.diag(R))
    return diag.size > 0 and diag.min() > RANK_TOL * diag.max()


def operator_norm_symmetric(M, eta: float, rng: np.random.Generator, C: float = 10.0) -> float:
    """Power-iteration estimate of ``max |eigenvalue|`` of a symmetric matrix.

    Runs ``ceil(C log(d / eta))`` iterations from a random unit vector and
    keeps the largest ``||M x||`` seen over the unit iterates. Unlike the
    Rayleigh quotient this does not stall when the two extreme eigenvalues
    have opposite signs and nearly equal magnitude.
    """
    M = np.asarray(M, dtype=np.float64)
    d = M.shape[0]
    if d == 0:
        return 0.0
    iters = max(1, int(math.ceil(C * math.log(max(d, 2) / eta))))
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    best = 0.0
    for _ in range(iters):
        y = M @ x
        norm = float(np.linalg.norm(y))
        best = max(best, norm)
        if norm == 0.0:
            break
        x = y / norm
    return best


def exact_z(S: Sketch, A) -> tuple[float, float]:
    """Dense reference values ``(Z1, Z2)`` from the SVD of ``S U``."""
    U = orthonormal_basis(A)
    s = np.linalg.svd(S.apply(U), compute_uv=False)
    s = np.pad(s, (0, max(0, U.shape[1] - s.size)))
    return float(s.min()), float(np.max(np.abs(s**2 - 1.0)))


def estimate_z(S: Sketch, A, eta: float, rng: np.random.Generator,
               c: float = 20.0, power_c: float = 10.0, T: Sketch | None = None) -> SpectralEstimates:
    """Sketched estimates of ``(Z1(S), Z2(S))`` for the column space of ``A``.

    ``T`` may be passed explicitly to share the embedding between calls. If
    ``T A`` turns out rank deficient, the exact QR of ``A`` is used instead and
    ``succeeded`` is set to False.
    """
    if not 0 < eta < 1 / 3:
        raise ValueError("eta must lie in (0, 1/3)")
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[1]
    R, _ = _r_factor(A, eta, rng, c, T)
    succeeded = True
    if not _rank_ok(R):
        succeeded = False
        R = qr(A, mode="r")[0][:d]
        if not _rank_ok(R):
            raise RankDeficientError("A is rank deficient")
    SAR = solve_triangular(R, S.apply(A).T, trans="T").T
    s = np.linalg.svd(SAR, compute_uv=False)
    z1 = float(s.min()) if s.size == d else 0.0
    M = SAR.T @ SAR - np.eye(d)
    z2 = operator_norm_symmetric(M, eta, rng, power_c)
    return SpectralEstimates(z1, z2, eta, succeeded)


def eig_via_sketch(A, Rinv, eta: float, rng: np.random.Generator,
                   c: float = 20.0, T: Sketch | None = None) -> EigEstimates:
    """Extreme singular values of ``A @ Rinv`` estimated from ``(T A) @ Rinv``."""
    A = np.asarray(A, dtype=np.float64)
    n, d = A.shape
    if T is None:
        mT = sketch_rows(d, eta, c)
        TA = A if mT >= n else make_countsketch(mT, n, rng).apply(A)
    else:
        TA = T.apply(A)
    s = np.linalg.svd(TA @ Rinv, compute_uv=False)
    if numerical_rank(s) < d:
        raise RankDeficientError("A @ Rinv is rank deficient")
    return EigEstimates(float(s[0]), float(s[-1]))
