import contextlib
import contextvars
import csv
import dataclasses
import enum
import logging
import math
import typing
from pathlib import Path

import numpy as np
from pydantic.v1 import BaseModel, validator

from app.services.errors import WorkloadError
from app.services.utils import get_split_lengths_by_len, split_offsets

logger = logging.getLogger(__name__)

_TIMED = contextvars.ContextVar("timed_phase", default=False)

# Stream ids for seeded generators.
_BATCH_STREAM = 3
_DELAY_STREAM = 4
_ROWS_STREAM = 5


class WorkloadKind(enum.Enum):
    BALANCED = "balanced"
    HETERO = "hetero"
    DELAYS = "delays"
    CSV = "csv"


@dataclasses.dataclass(frozen=True)
class TableLayout:
    num_dense: int
    num_tables: int


LAYOUTS = {
    "criteo": TableLayout(num_dense=13, num_tables=26),
    "aliccp": TableLayout(num_dense=13, num_tables=23),
}


def default_table_rows(num_tables: int, seed: int = 0) -> typing.List[int]:
    rng = np.random.default_rng([seed, _ROWS_STREAM])
    return [int(r) for r in rng.integers(10_000, 100_001, size=num_tables)]


class WorkloadSpec(BaseModel):
    kind: WorkloadKind = WorkloadKind.BALANCED
    batch_size: int = 512
    num_batches: int = 64
    num_dense: int = 13
    table_rows: typing.List[int]
    max_multiplicity: int = 1
    delay_max_s: float = 0.0
    comm_size: int = 1
    seed: int = 0
    csv_path: typing.Optional[Path] = None

    class Config:
        frozen = True

    @validator("batch_size", "num_batches", "max_multiplicity", "comm_size", "num_dense")
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("delay_max_s")
    def _non_negative_delay(cls, v):
        if v < 0:
            raise ValueError("delay_max_s must be >= 0")
        return v

    @validator("seed")
    def _non_negative_seed(cls, v):
        if v < 0:
            raise ValueError("seed must be >= 0")
        return v

    @validator("table_rows")
    def _rows_positive(cls, v):
        if not v or any(r < 1 for r in v):
            raise ValueError("table_rows must be a non-empty list of positive counts")
        return v

    @validator("csv_path", always=True)
    def _csv_needs_path(cls, v, values):
        if values.get("kind") == WorkloadKind.CSV and v is None:
            raise ValueError("csv workload needs csv_path")
        return v

    @property
    def num_tables(self) -> int:
        return len(self.table_rows)


@dataclasses.dataclass
class InferenceBatch:
    """
    One batch of samples. Sparse features are stored per table as a
    per-sample ``lengths`` vector plus the flat ``indices`` of all samples.
    """

    dense: np.ndarray
    lengths: typing.List[np.ndarray]
    indices: typing.List[np.ndarray]
    labels: typing.Optional[np.ndarray] = None

    @property
    def batch_size(self) -> int:
        return self.dense.shape[0]

    @property
    def num_tables(self) -> int:
        return len(self.lengths)

    def offsets(self, table: int) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.lengths[table], dtype=np.int64)))

    def sample_indices(self, table: int, sample: int) -> np.ndarray:
        offsets = self.offsets(table)
        return self.indices[table][offsets[sample] : offsets[sample + 1]]

    def rows(self, start: int, end: int) -> "InferenceBatch":
        """The mini-batch of samples ``[start, end)``."""
        lengths, indices = [], []
        for t in range(self.num_tables):
            offsets = self.offsets(t)
            lengths.append(self.lengths[t][start:end])
            indices.append(self.indices[t][offsets[start] : offsets[end]])
        labels = None if self.labels is None else self.labels[start:end]
        return InferenceBatch(self.dense[start:end], lengths, indices, labels)

    def check(self, table_rows: typing.Sequence[int], max_multiplicity: int = None) -> None:
        if len(table_rows) != self.num_tables:
            raise WorkloadError(f"batch has {self.num_tables} tables, model has {len(table_rows)}")
        for t, (lengths, indices) in enumerate(zip(self.lengths, self.indices)):
            if len(lengths) != self.batch_size:
                raise WorkloadError(f"table {t}: {len(lengths)} lengths for {self.batch_size} samples")
            if lengths.size and lengths.min() < 1:
                raise WorkloadError(f"table {t}: every sample needs at least one index")
            if max_multiplicity is not None and lengths.size and lengths.max() > max_multiplicity:
                raise WorkloadError(f"table {t}: multiplicity {lengths.max()} > {max_multiplicity}")
            if indices.size and (indices.min() < 0 or indices.max() >= table_rows[t]):
                raise WorkloadError(f"table {t}: index out of range [0, {table_rows[t]})")


@dataclasses.dataclass
class Workload:
    spec: WorkloadSpec
    batches: typing.List[InferenceBatch]
    delays: np.ndarray

    def delays_for(self, rank: int) -> np.ndarray:
        return self.delays[rank]


@contextlib.contextmanager
def timed_phase():
    """Marks the measured loop; generators refuse to run inside it."""
    token = _TIMED.set(True)
    try:
        yield
    finally:
        _TIMED.reset(token)


def in_timed_phase() -> bool:
    return _TIMED.get()


def _ensure_untimed(what: str) -> None:
    if _TIMED.get():
        raise WorkloadError(f"{what} called inside the timed phase")


def _random_batch(
    rng: np.random.Generator,
    batch_size: int,
    num_dense: int,
    table_rows: typing.Sequence[int],
    max_multiplicity: int,
) -> InferenceBatch:
    dense = rng.random((batch_size, num_dense), dtype=np.float32)
    lengths, indices = [], []
    for rows in table_rows:
        counts = rng.integers(1, max_multiplicity + 1, size=batch_size).astype(np.int32)
        lengths.append(counts)
        indices.append(rng.integers(0, rows, size=int(counts.sum()), dtype=np.int64))
    return InferenceBatch(dense, lengths, indices)


def _generate(spec: WorkloadSpec, max_multiplicity: int) -> typing.List[InferenceBatch]:
    return [
        _random_batch(
            np.random.default_rng([spec.seed, _BATCH_STREAM, i]),
            spec.batch_size,
            spec.num_dense,
            spec.table_rows,
            max_multiplicity,
        )
        for i in range(spec.num_batches)
    ]


def gen_balanced(spec: WorkloadSpec) -> typing.List[InferenceBatch]:
    _ensure_untimed("gen_balanced")
    return _generate(spec, 1)


def gen_hetero(spec: WorkloadSpec) -> typing.List[InferenceBatch]:
    _ensure_untimed("gen_hetero")
    return _generate(spec, spec.max_multiplicity)


def gen_delays(spec: WorkloadSpec) -> np.ndarray:
    """Per (rank, iteration) delays, uniform on ``[0, delay_max_s]``."""
    _ensure_untimed("gen_delays")
    if spec.delay_max_s == 0:
        return np.zeros((spec.comm_size, spec.num_batches))
    rng = np.random.default_rng([spec.seed, _DELAY_STREAM])
    return rng.uniform(0.0, spec.delay_max_s, size=(spec.comm_size, spec.num_batches))


def load_csv(
    path: typing.Union[str, Path],
    batch_size: int,
    table_rows: typing.Sequence[int],
    num_dense: int = 13,
) -> typing.List[InferenceBatch]:
    """
    Read ``label, dense..., sparse...`` rows into batches with one index per
    table and sample. The last batch may be short.
    """
    _ensure_untimed("load_csv")
    num_tables = len(table_rows)
    expected = 1 + num_dense + num_tables
    labels, dense, sparse = [], [], []
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != expected:
                raise WorkloadError(
                    f"{path}:{line_no}: expected {expected} fields "
                    f"(label, {num_dense} dense, {num_tables} sparse), got {len(row)}"
                )
            try:
                labels.append(float(row[0]))
                dense.append([float(v) for v in row[1 : 1 + num_dense]])
                ids = [int(v) for v in row[1 + num_dense :]]
            except ValueError as e:
                raise WorkloadError(f"{path}:{line_no}: {e}") from None
            for t, value in enumerate(ids):
                if not 0 <= value < table_rows[t]:
                    raise WorkloadError(
                        f"{path}:{line_no}: id {value} of table {t} out of range [0, {table_rows[t]})"
                    )
            sparse.append(ids)

    batches = []
    for start in range(0, len(labels), batch_size):
        end = min(start + batch_size, len(labels))
        ids = np.asarray(sparse[start:end], dtype=np.int64).reshape(end - start, num_tables)
        batches.append(
            InferenceBatch(
                dense=np.asarray(dense[start:end], dtype=np.float32).reshape(end - start, num_dense),
                lengths=[np.ones(end - start, dtype=np.int32) for _ in range(num_tables)],
                indices=[np.ascontiguousarray(ids[:, t]) for t in range(num_tables)],
                labels=np.asarray(labels[start:end], dtype=np.float32),
            )
        )
    logger.info(f"Loaded {len(labels)} samples in {len(batches)} batches from {path}")
    return batches


def generate(spec: WorkloadSpec) -> Workload:
    """Pre-generate every batch and delay of a workload before timing starts."""
    if spec.kind == WorkloadKind.HETERO:
        batches = gen_hetero(spec)
    elif spec.kind == WorkloadKind.CSV:
        batches = load_csv(spec.csv_path, spec.batch_size, spec.table_rows, spec.num_dense)
    elif spec.kind in (WorkloadKind.BALANCED, WorkloadKind.DELAYS):
        batches = gen_balanced(spec)
    else:
        raise ValueError(f"Invalid workload kind: {spec.kind}")
    if spec.kind == WorkloadKind.DELAYS:
        delays = gen_delays(spec)
    else:
        delays = np.zeros((spec.comm_size, len(batches)))
    return Workload(spec, batches, delays[:, : len(batches)])


class ShardPlan:
    """
    Static placement: tables in contiguous blocks of ``ceil(T / P)`` and
    batch rows split into contiguous mini-batches.
    """

    def __init__(self, comm_size: int, num_tables: int) -> None:
        self.comm_size = comm_size
        self.num_tables = num_tables
        self.block = math.ceil(num_tables / comm_size)

    def tables_of(self, rank: int) -> range:
        start = min(rank * self.block, self.num_tables)
        return range(start, min(start + self.block, self.num_tables))

    def row_counts(self, batch_size: int) -> typing.List[int]:
        return get_split_lengths_by_len(batch_size, self.comm_size)

    def row_range(self, batch_size: int, rank: int) -> typing.Tuple[int, int]:
        offsets = split_offsets(self.row_counts(batch_size))
        return offsets[rank], offsets[rank + 1]

    def _lookups(self, batch: InferenceBatch, owner: int, requester: int) -> typing.Tuple[int, int]:
        start, end = self.row_range(batch.batch_size, requester)
        count = 0
        for t in self.tables_of(owner):
            offsets = batch.offsets(t)
            count += int(offsets[end] - offsets[start])
        return end - start, count

    def metadata_capacity(self, batches: typing.Sequence[InferenceBatch]) -> int:
        """Largest routing segment: int32 lengths plus int64 indices per owned table."""
        best = 1
        for batch in batches:
            for owner in range(self.comm_size):
                tables = len(self.tables_of(owner))
                for requester in range(self.comm_size):
                    rows, count = self._lookups(batch, owner, requester)
                    best = max(best, rows * tables * 4 + count * 8)
        return best

    def data_capacity(self, batches: typing.Sequence[InferenceBatch], emb_dim: int) -> int:
        """Largest embedding segment: one float32 row per looked-up index."""
        best = 0
        for batch in batches:
            for owner in range(self.comm_size):
                for requester in range(self.comm_size):
                    best = max(best, self._lookups(batch, owner, requester)[1])
        return max(best * emb_dim * 4, 1)
