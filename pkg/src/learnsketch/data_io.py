"""Synthetic task generators, CSV chunking, task-set persistence and the results CSV."""

from __future__ import annotations

import csv
import fcntl
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .constraints import ConstraintSpec, NUCLEAR
from .estimate import numerical_rank
from .ihs import Task, build_svm_dual

MAX_RETRIES = 10
RESULTS_HEADER = ["experiment", "dataset", "sketch", "m", "round", "trial", "error", "time_ms", "extra"]


class DataError(ValueError):
    pass


def _full_rank(A) -> bool:
    return numerical_rank(np.linalg.svd(A, compute_uv=False)) == A.shape[1]


def _retry(make, rng):
    for _ in range(MAX_RETRIES):
        task = make(rng)
        if _full_rank(task.A):
            return task
    raise DataError(f"could not generate a full-rank task in {MAX_RETRIES} attempts")


def gen_gaussian_mixture_svm(n: int, d: int, C: float, count: int, rng: np.random.Generator) -> list[Task]:
    """SVM-dual tasks from a two-component Gaussian mixture with means uniform in [-3, 3]^n.

    Each task holds ``d`` samples (as columns) with equal component weights.
    """
    if min(n, d, count) < 1 or not C > 0:
        raise DataError("n, d, count must be positive and C > 0")

    def make(gen):
        mu = gen.uniform(-3.0, 3.0, size=(2, n))
        comp = gen.integers(0, 2, size=d)
        samples = mu[comp].T + gen.standard_normal((n, d))
        z = np.where(comp == 1, 1.0, -1.0)
        task = build_svm_dual(samples, z, C)
        task.labels = z
        return task

    return [_retry(make, rng) for _ in range(count)]


def gen_lowrank_matrix(n: int, d1: int, d2: int, r: int, rho: float, sigma: float, count: int,
                       rng: np.random.Generator) -> list[Task]:
    """Matrix-estimation tasks ``B = A X* + W`` with ``rank(X*) <= r`` and a nuclear-ball constraint.

    ``X*`` is rescaled onto the ball of radius ``rho`` only when it falls outside.
    """
    if r > min(d1, d2):
        raise DataError("rank must not exceed min(d1, d2)")

    def make(gen):
        A = gen.standard_normal((n, d1))
        X = gen.standard_normal((d1, r)) @ gen.standard_normal((r, d2))
        nuc = np.linalg.svd(X, compute_uv=False).sum()
        rescaled = nuc > rho
        if rescaled:
            X *= rho / nuc
        B = A @ X + sigma * gen.standard_normal((n, d2))
        task = Task(A, B, ConstraintSpec(NUCLEAR, rho=rho))
        task.truth = X
        task.rescaled = rescaled
        return task

    return [_retry(make, rng) for _ in range(count)]


def gen_leverage_dataset(n: int, d: int, eps: float, sigma: float, tau: float | None, count: int,
                         rng: np.random.Generator) -> list[Task]:
    """Least-squares tasks whose first ``r = ceil(d / eps)`` rows carry most of the leverage.

    ``A = U diag(s) V^T`` where ``U`` orthonormalizes ``[C; D]`` (``C`` with
    orthonormal columns, ``D`` small Gaussian with std ``tau``) and ``s`` is
    log-uniform on [0.1, 10]. ``tau`` defaults to ``r / (10 n)``.
    """
    r = int(math.ceil(d / eps - 1e-9))
    if not r < n:
        raise DataError(f"r = {r} must be smaller than n = {n}")
    if tau is None:
        tau = r / (10 * n)

    def make(gen):
        C = np.linalg.qr(gen.standard_normal((r, d)))[0]
        D = tau * gen.standard_normal((n - r, d))
        U = np.linalg.qr(np.vstack([C, D]))[0]
        V = np.linalg.qr(gen.standard_normal((d, d)))[0]
        s = np.exp(gen.uniform(math.log(0.1), math.log(10.0), size=d))
        A = (U * s) @ V.T
        x_true = gen.standard_normal(d)
        task = Task(A, A @ x_true + sigma * gen.standard_normal(n), name="leverage-synthetic")
        task.truth = x_true
        return task

    return [_retry(make, rng) for _ in range(count)]


# --- manifests and task files ----------------------------------------------

@dataclass
class DatasetManifest:
    family: str
    params: dict
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int | None = None
    constraint: dict = field(default_factory=lambda: {"constraint": "free"})
    source: str | None = None

    def __post_init__(self):
        if self.family not in ("gaussian-mixture-svm", "lowrank-matrix", "leverage-synthetic", "csv-chunked"):
            raise DataError(f"unknown dataset family {self.family!r}")

    def save(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        obj = json.loads((Path(directory) / "manifest.json").read_text())
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def write_matrix(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64).T).T if np.ndim(M) == 1 else np.asarray(M)
    np.savetxt(path, M, delimiter=",", fmt="%.17g")


def read_matrix(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                col = next(j for j, cell in enumerate(row, start=1) if not _is_float(cell))
                raise DataError(f"{path}: non-numeric cell at row {lineno}, column {col}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"{path}: ragged row {lineno}")
    return np.array(rows, dtype=np.float64)


def _is_float(cell) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def save_tasks(directory, tasks, manifest: DatasetManifest, train_count: int) -> DatasetManifest:
    """Write one ``A``/``b`` CSV pair per task plus ``manifest.json``; the first ``train_count`` tasks are training data."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, task in enumerate(tasks):
        name = f"task_{i:04d}"
        write_matrix(directory / f"{name}_A.csv", task.A)
        write_matrix(directory / f"{name}_b.csv", task.b)
        names.append(name)
    manifest.train, manifest.test = names[:train_count], names[train_count:]
    if tasks:
        manifest.constraint = tasks[0].constraint.to_config()
    manifest.save(directory)
    return manifest


def load_tasks(directory, split: str = "test") -> tuple[DatasetManifest, list[Task]]:
    directory = Path(directory)
    manifest = DatasetManifest.load(directory)
    names = {"train": manifest.train, "test": manifest.test, "all": manifest.train + manifest.test}[split]
    spec = ConstraintSpec.from_config(manifest.constraint)
    tasks = []
    for name in names:
        A = read_matrix(directory / f"{name}_A.csv")
        b = read_matrix(directory / f"{name}_b.csv")
        if spec.kind != NUCLEAR:
            b = b.ravel()
        tasks.append(Task(A, b, spec, name=name))
    return manifest, tasks


def chunk_csv(path, rows_per_chunk: int, target_cols: int, train_frac: float, rng: np.random.Generator,
              out_dir=None, constraint: ConstraintSpec | None = None):
    """Split a numeric CSV into contiguous row chunks; the last ``target_cols`` columns are the target.

    Row order inside each chunk is preserved. Chunk order is shuffled with
    ``rng`` before the train/test split. Returns ``(manifest, tasks)`` with
    tasks listed train first; files are written when ``out_dir`` is given.
    """
    data = read_matrix(path)
    total, cols = data.shape
    if not 1 <= rows_per_chunk <= total:
        raise DataError(f"rows_per_chunk must lie in [1, {total}]")
    if not 1 <= target_cols < cols:
        raise DataError("target_cols must leave at least one feature column")
    constraint = constraint or ConstraintSpec()
    chunks = [data[k:k + rows_per_chunk] for k in range(0, total - rows_per_chunk + 1, rows_per_chunk)]
    order = rng.permutation(len(chunks))
    n_train = int(round(train_frac * len(chunks)))
    tasks = []
    for idx in order:
        block = chunks[idx]
        b = block[:, cols - target_cols:]
        if target_cols == 1 and constraint.kind != NUCLEAR:
            b = b.ravel()
        tasks.append(Task(block[:, :cols - target_cols], b, constraint, name=f"chunk_{idx:04d}"))
    manifest = DatasetManifest("csv-chunked", {"rows_per_chunk": rows_per_chunk, "target_cols": target_cols,
                                               "train_frac": train_frac}, source=str(path))
    manifest.constraint = constraint.to_config()
    manifest.train = [t.name for t in tasks[:n_train]]
    manifest.test = [t.name for t in tasks[n_train:]]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for t in tasks:
            write_matrix(out_dir / f"{t.name}_A.csv", t.A)
            write_matrix(out_dir / f"{t.name}_b.csv", t.b)
        manifest.save(out_dir)
    return manifest, tasks


# --- results ---------------------------------------------------------------

@dataclass
class ExperimentRecord:
    experiment: str
    dataset: str
    sketch: str
    m: int
    round: int
    trial: int
    error: float
    time_ms: float
    extra: str = ""

    def row(self) -> list:
        return [self.experiment, self.dataset, self.sketch, self.m, self.round, self.trial,
                repr(float(self.error)), repr(float(self.time_ms)), self.extra]


def format_extra(**kv) -> str:
    return ";".join(f"{k}={v}" for k, v in kv.items())


def parse_extra(extra: str) -> dict:
    return dict(item.split("=", 1) for item in extra.split(";") if item)


def _encode(rows) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode()


def write_results(records, path) -> None:
    """Append records to ``path``, writing the header if the file is new or empty.

    Each call appends under an exclusive lock with a single ``write``, so
    concurrent writers never interleave lines.
    """
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        rows = [] if os.fstat(fd).st_size else [RESULTS_HEADER]
        rows.extend(r.row() for r in records)
        if rows:
            os.write(fd, _encode(rows))
    finally:
        os.close(fd)


def read_results(path) -> list[ExperimentRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RESULTS_HEADER):
                raise DataError(f"{path}: line {lineno} has {len(row)} fields")
            try:
                out.append(ExperimentRecord(row[0], row[1], row[2], int(row[3]), int(row[4]), int(row[5]),
                                            float(row[6]), float(row[7]), row[8]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return out
