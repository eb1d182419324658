"""Sketching matrices: Gaussian, CountSketch, SJLT, CountSketch-type and oracle-split.

All sparse families store one (row, value) pair per column and are applied by
streaming over the rows of ``A``; the dense matrix is only realized on request
through :meth:`Sketch.todense`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class SketchRecordError(ValueError):
    """Raised when a persisted sketch record is malformed."""


def _check_operand(n: int, A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim not in (1, 2) or A.shape[0] != n:
        raise ValueError(f"sketch has {n} columns but operand has shape {A.shape}")
    return A


class Sketch:
    """Common interface. Subclasses define ``m``, ``n``, ``apply`` and ``todense``."""

    variant: str = ""
    m: int
    n: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    def apply(self, A: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def todense(self) -> np.ndarray:
        return self.apply(np.eye(self.n))

    def __matmul__(self, A):
        return self.apply(A)


@dataclass
class CountSketchType(Sketch):
    """Sketch with a single nonzero per column: ``S[p[i], i] = v[i]``.

    ``p`` is 0-based here; persisted records use 1-based rows.
    """

    m: int
    n: int
    p: np.ndarray
    v: np.ndarray
    variant: str = "countsketch-type"

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        if self.p.shape != (self.n,) or self.v.shape != (self.n,):
            raise ValueError("p and v must have length n")
        if self.n and (self.p.min() < 0 or self.p.max() >= self.m):
            raise ValueError("row index out of range")

    def apply(self, A):
        A = _check_operand(self.n, A)
        out = np.zeros((self.m,) + A.shape[1:])
        # output row p_i accumulates v_i * (row i of A)
        np.add.at(out, self.p, self.v.reshape((-1,) + (1,) * (A.ndim - 1)) * A)
        return out

    def todense(self):
        S = np.zeros((self.m, self.n))
        S[self.p, np.arange(self.n)] = self.v
        return S

    def with_values(self, v) -> "CountSketchType":
        return CountSketchType(self.m, self.n, self.p.copy(), np.array(v, dtype=np.float64), self.variant)

    def copy(self) -> "CountSketchType":
        return self.with_values(self.v)


@dataclass
class GaussianSketch(Sketch):
    """Dense ``G / sqrt(m)`` with ``G`` i.i.d. N(0, 1), regenerated from ``seed``."""

    m: int
    n: int
    seed: int
    matrix: np.ndarray = field(init=False, repr=False)
    variant: str = "gaussian"

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        gen = np.random.default_rng(self.seed)
        self.matrix = gen.standard_normal((self.m, self.n)) / np.sqrt(self.m)

    def apply(self, A):
        return self.matrix @ _check_operand(self.n, A)

    def todense(self):
        return self.matrix.copy()


@dataclass
class SJLT(Sketch):
    """Vertical concatenation of ``s`` independent CountSketch blocks of ``m/s`` rows."""

    blocks: list
    variant: str = "sjlt"

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("SJLT needs at least one block")
        rows = {b.m for b in self.blocks}
        cols = {b.n for b in self.blocks}
        if len(rows) != 1 or len(cols) != 1:
            raise ValueError("SJLT blocks must share dimensions")

    @property
    def s(self) -> int:
        return len(self.blocks)

    @property
    def m(self) -> int:
        return self.blocks[0].m * self.s

    @property
    def n(self) -> int:
        return self.blocks[0].n

    def apply(self, A):
        return np.concatenate([b.apply(A) for b in self.blocks], axis=0)

    def todense(self):
        return np.vstack([b.todense() for b in self.blocks])


@dataclass
class OracleSplitSketch(Sketch):
    """Identity on the rows in ``index`` (kept in sorted order), CountSketch ``inner`` on the rest.

    The sketched output is ``[A[index]; inner @ A[complement]]``.
    """

    n: int
    index: np.ndarray
    inner: CountSketchType | None
    variant: str = "oracle-split"

    def __post_init__(self):
        self.index = np.unique(np.asarray(self.index, dtype=np.int64))
        if self.index.size and (self.index[0] < 0 or self.index[-1] >= self.n):
            raise ValueError("oracle index out of range")
        mask = np.ones(self.n, dtype=bool)
        mask[self.index] = False
        self.complement = np.flatnonzero(mask)
        if self.inner is None:
            if self.complement.size:
                raise ValueError("inner sketch required when the oracle set is not all rows")
        elif self.inner.n != self.complement.size:
            raise ValueError("inner sketch must have one column per complement row")

    @property
    def m(self) -> int:
        return self.index.size + (self.inner.m if self.inner is not None else 0)

    def apply(self, A):
        A = _check_operand(self.n, A)
        top = A[self.index]
        if self.inner is None:
            return top.copy()
        return np.concatenate([top, self.inner.apply(A[self.complement])], axis=0)


def make_gaussian(m: int, n: int, rng: np.random.Generator) -> GaussianSketch:
    # The child seed is what gets persisted, so the matrix can be rebuilt exactly.
    seed = int(rng.integers(0, 2**63 - 1))
    return GaussianSketch(m, n, seed)


def make_countsketch(m: int, n: int, rng: np.random.Generator) -> CountSketchType:
    p = rng.integers(0, m, size=n)
    v = rng.choice(np.array([-1.0, 1.0]), size=n)
    return CountSketchType(m, n, p, v, variant="countsketch")


def make_sjlt(m: int, n: int, s: int, rng: np.random.Generator) -> SJLT:
    if s < 1 or m % s:
        raise ValueError(f"block count s={s} must be positive and divide m={m}")
    return SJLT([make_countsketch(m // s, n, rng) for _ in range(s)])


def identity_sketch(n: int, scale: float = 1.0) -> CountSketchType:
    """The n x n identity (times ``scale``) as a CountSketch-type sketch."""
    return CountSketchType(n, n, np.arange(n), np.full(n, float(scale)))


def apply(S: Sketch, A: np.ndarray) -> np.ndarray:
    return S.apply(A)


def stream_apply(S: Sketch, A: np.ndarray) -> tuple[np.ndarray, int]:
    """Reference streaming product that counts scalar multiply-adds.

    Walks the nonzeros of ``A`` one at a time. Slow; meant for verifying the
    input-sparsity cost of the sparse families.
    """
    if isinstance(S, SJLT):
        parts = [stream_apply(b, A) for b in S.blocks]
        return np.concatenate([p[0] for p in parts], axis=0), sum(p[1] for p in parts)
    if not isinstance(S, CountSketchType):
        raise TypeError("stream_apply supports CountSketch-type and SJLT sketches only")
    A = _check_operand(S.n, A)
    A2 = A.reshape(A.shape[0], -1)
    out = np.zeros((S.m, A2.shape[1]))
    ops = 0
    for i, j in zip(*np.nonzero(A2)):
        out[S.p[i], j] += S.v[i] * A2[i, j]
        ops += 1
    return out.reshape((S.m,) + A.shape[1:]), ops


# --- persistence -----------------------------------------------------------

def serialize_sketch(S: Sketch) -> dict:
    """JSON-ready record. Row indices are 1-based."""
    if isinstance(S, GaussianSketch):
        return {"variant": "gaussian", "seed": S.seed, "m": S.m, "n": S.n}
    if isinstance(S, CountSketchType):
        return {"variant": S.variant, "m": S.m, "n": S.n,
                "p": (S.p + 1).tolist(), "v": S.v.tolist()}
    if isinstance(S, SJLT):
        return {"variant": "sjlt", "m": S.m, "n": S.n, "s": S.s,
                "blocks": [serialize_sketch(b) for b in S.blocks]}
    if isinstance(S, OracleSplitSketch):
        return {"variant": "oracle-split", "m": S.m, "n": S.n,
                "index": (S.index + 1).tolist(),
                "inner": None if S.inner is None else serialize_sketch(S.inner)}
    raise TypeError(f"cannot serialize {type(S).__name__}")


def _field(rec, key):
    try:
        return rec[key]
    except (KeyError, TypeError):
        raise SketchRecordError(f"sketch record missing field {key!r}") from None


def deserialize_sketch(rec: dict) -> Sketch:
    variant = _field(rec, "variant")
    m, n = int(_field(rec, "m")), int(_field(rec, "n"))
    if variant == "gaussian":
        return GaussianSketch(m, n, int(_field(rec, "seed")))
    if variant in ("countsketch", "countsketch-type"):
        p = np.asarray(_field(rec, "p"), dtype=np.int64)
        v = np.asarray(_field(rec, "v"), dtype=np.float64)
        if p.shape != (n,) or v.shape != (n,):
            raise SketchRecordError("p and v must have length n")
        if n and (p.min() < 1 or p.max() > m):
            raise SketchRecordError(f"row index outside [1, {m}]")
        return CountSketchType(m, n, p - 1, v, variant=variant)
    if variant == "sjlt":
        blocks = [deserialize_sketch(b) for b in _field(rec, "blocks")]
        S = SJLT(blocks)
        if S.m != m or S.n != n:
            raise SketchRecordError("SJLT block dimensions disagree with record")
        return S
    if variant == "oracle-split":
        index = np.asarray(_field(rec, "index"), dtype=np.int64)
        if index.size and (index.min() < 1 or index.max() > n):
            raise SketchRecordError(f"oracle index outside [1, {n}]")
        inner_rec = _field(rec, "inner")
        inner = None if inner_rec is None else deserialize_sketch(inner_rec)
        try:
            return OracleSplitSketch(n, index - 1, inner)
        except ValueError as exc:
            raise SketchRecordError(str(exc)) from None
    raise SketchRecordError(f"unknown sketch variant {variant!r}")


def dumps(S: Sketch) -> str:
    return json.dumps(serialize_sketch(S))


def loads(text: str) -> Sketch:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SketchRecordError(f"invalid JSON: {exc}") from None
    return deserialize_sketch(rec)
