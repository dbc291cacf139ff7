import asyncio
import collections
import dataclasses
import logging
import typing

import numpy as np
from pydantic.v1 import BaseModel, root_validator, validator

from app.services.collective import (
    BlsConfig,
    BlsContext,
    RecvResult,
    RefAlltoallv,
    SafetyMode,
    bls_init,
    ref_alltoallv,
)
from app.services.errors import ProtocolError, WorkloadError
from app.services.metrics import RankRecorder
from app.services.transport import BaseTransport
from app.services.workloads import InferenceBatch, ShardPlan, timed_phase

logger = logging.getLogger(__name__)

BOTTOM, TOP, TABLES = 0, 1, 2
FLOAT_BYTES = np.dtype(np.float32).itemsize


class ModelConfig(BaseModel):
    emb_dim: int = 64
    num_dense: int = 13
    table_rows: typing.List[int]
    bottom_mlp_dims: typing.List[int] = [512, 256, 64]
    top_mlp_dims: typing.List[int] = [512, 256, 1]
    seed: int = 0

    class Config:
        frozen = True

    @validator("emb_dim", "num_dense")
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("table_rows")
    def _rows_positive(cls, v):
        if not v or any(r < 1 for r in v):
            raise ValueError("table_rows must be a non-empty list of positive counts")
        return v

    @validator("seed")
    def _non_negative_seed(cls, v):
        if v < 0:
            raise ValueError("seed must be >= 0")
        return v

    @root_validator(skip_on_failure=True)
    def _layer_shapes(cls, values):
        bottom, top = values["bottom_mlp_dims"], values["top_mlp_dims"]
        if not bottom or bottom[-1] != values["emb_dim"]:
            raise ValueError(f"last bottom layer must have emb_dim={values['emb_dim']} outputs")
        if not top or top[-1] != 1:
            raise ValueError("last top layer must have a single output")
        if any(d < 1 for d in bottom + top):
            raise ValueError("layer sizes must be positive")
        return values

    @property
    def num_tables(self) -> int:
        return len(self.table_rows)

    @property
    def interaction_dim(self) -> int:
        vectors = self.num_tables + 1
        return self.emb_dim + vectors * (vectors - 1) // 2


@dataclasses.dataclass
class Prediction:
    ctr: np.ndarray


Layer = typing.Tuple[np.ndarray, np.ndarray]


def _init_layers(seed: int, stack: int, dims: typing.Sequence[int]) -> typing.List[Layer]:
    layers = []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        rng = np.random.default_rng([seed, stack, layer])
        scale = 0.5 / fan_in
        weight = rng.uniform(-scale, scale, (fan_in, fan_out)).astype(np.float32)
        bias = rng.uniform(-scale, scale, fan_out).astype(np.float32)
        layers.append((weight, bias))
    return layers


def init_table(config: ModelConfig, table: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, TABLES, table])
    scale = 0.5 / config.emb_dim
    return rng.uniform(-scale, scale, (config.table_rows[table], config.emb_dim)).astype(np.float32)


class DlrmModel:
    """Dense weights plus the embedding tables held by one rank (all tables if ``tables`` is None)."""

    def __init__(self, config: ModelConfig, tables: typing.Optional[typing.Iterable[int]] = None) -> None:
        self.config = config
        self.bottom = _init_layers(config.seed, BOTTOM, [config.num_dense] + list(config.bottom_mlp_dims))
        self.top = _init_layers(config.seed, TOP, [config.interaction_dim] + list(config.top_mlp_dims))
        owned = range(config.num_tables) if tables is None else tables
        self.tables: typing.Dict[int, np.ndarray] = {t: init_table(config, t) for t in owned}

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tables.values())


def mlp_layer(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine layer accumulated in ascending input-feature order."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"layer expects {weight.shape[0]} features, got input of shape {x.shape}")
    acc = np.zeros((x.shape[0], weight.shape[1]), dtype=np.float32)
    for i in range(weight.shape[0]):
        acc += x[:, i : i + 1] * weight[i]
    acc += bias
    return acc


def apply_mlp(x: np.ndarray, layers: typing.Sequence[Layer], sigmoid_last: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    for n, (weight, bias) in enumerate(layers):
        x = mlp_layer(x, weight, bias)
        if sigmoid_last and n == len(layers) - 1:
            x = 1.0 / (1.0 + np.exp(-x))
        else:
            x = np.maximum(x, np.float32(0))
    return x


def bottom_mlp(model: DlrmModel, dense: np.ndarray) -> np.ndarray:
    return apply_mlp(dense, model.bottom)


def top_mlp(model: DlrmModel, z: np.ndarray) -> Prediction:
    return Prediction(apply_mlp(z, model.top, sigmoid_last=True)[:, 0])


def gather_rows(table: np.ndarray, indices: np.ndarray, table_id: int = None) -> np.ndarray:
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise WorkloadError(f"table {table_id}: index out of range [0, {table.shape[0]})")
    return table[indices]


def pool_rows(rows: np.ndarray, lengths: np.ndarray, emb_dim: int) -> np.ndarray:
    """Embedding-bag sum: each sample adds its rows in index order, starting from zero."""
    pooled = np.zeros((len(lengths), emb_dim), dtype=np.float32)
    if not len(lengths):
        return pooled
    starts = np.concatenate(([0], np.cumsum(lengths, dtype=np.int64)[:-1]))
    for p in range(int(lengths.max())):
        mask = lengths > p
        pooled[mask] += rows[starts[mask] + p]
    return pooled


def apply_emb(
    model: DlrmModel, batch: InferenceBatch, tables: typing.Optional[typing.Iterable[int]] = None
) -> typing.List[np.ndarray]:
    """Pooled vectors for ``tables`` (default: every table the model holds), one per sample."""
    tables = sorted(model.tables) if tables is None else tables
    pooled = []
    for t in tables:
        if t not in model.tables:
            raise WorkloadError(f"table {t} is not held by this model")
        rows = gather_rows(model.tables[t], batch.indices[t], t)
        pooled.append(pool_rows(rows, batch.lengths[t], model.config.emb_dim))
    return pooled


def interact_features(x: np.ndarray, ly: typing.Sequence[np.ndarray]) -> np.ndarray:
    """``x`` followed by the strictly lower-triangular dots of ``[x; ly...]``, row-major."""
    for v in ly:
        if v.shape != x.shape:
            raise ValueError(f"interaction expects vectors of shape {x.shape}, got {v.shape}")
    stacked = np.stack([x] + list(ly), axis=1).astype(np.float32, copy=False)
    li, lj = np.tril_indices(stacked.shape[1], -1)
    dots = np.zeros((x.shape[0], len(li)), dtype=np.float32)
    for d in range(x.shape[1]):
        dots += stacked[:, li, d] * stacked[:, lj, d]
    return np.concatenate([x, dots], axis=1)


def forward_local(model: DlrmModel, batch: InferenceBatch) -> Prediction:
    """Single-process forward over all tables; the no-communication oracle."""
    x = bottom_mlp(model, batch.dense)
    ly = apply_emb(model, batch, range(model.config.num_tables))
    return top_mlp(model, interact_features(x, ly))


@dataclasses.dataclass
class RoutedBatch:
    """What one rank holds for one batch once lookups are routed to table owners."""

    index: int
    dense: np.ndarray
    # This rank's own rows: per table lengths, for unpacking received rows.
    local_lengths: typing.List[np.ndarray]
    # Per requester rank, per owned table: (lengths, indices) to look up.
    requests: typing.List[typing.List[typing.Tuple[np.ndarray, np.ndarray]]]
    recv_lengths: typing.List[int]


class RankContext:
    """Per-rank state of the distributed inference loops."""

    def __init__(
        self,
        comm: BaseTransport,
        model: DlrmModel,
        plan: ShardPlan,
        bls: BlsContext,
        ref: RefAlltoallv,
    ) -> None:
        self.comm = comm
        self.model = model
        self.plan = plan
        self.bls = bls
        self.ref = ref
        self.routed: typing.List[RoutedBatch] = []
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def rank(self) -> int:
        return self.comm.rank

    @classmethod
    async def create(
        cls,
        comm: BaseTransport,
        config: ModelConfig,
        batches: typing.Sequence[InferenceBatch],
        bound_k: int = 0,
        safety_mode: SafetyMode = SafetyMode.FAITHFUL,
        wait_timeout_s: typing.Optional[float] = None,
    ) -> "RankContext":
        """
        Registers the routing and embedding windows sized for ``batches``
        (the full, pre-generated batches), then routes every batch's lookups.
        """
        plan = ShardPlan(comm.comm_size, config.num_tables)
        model = DlrmModel(config, plan.tables_of(comm.rank))
        ref = await RefAlltoallv.init(comm, plan.metadata_capacity(batches), wait_timeout_s)
        bls = await bls_init(
            comm,
            BlsConfig(
                bound_k=bound_k,
                per_peer_bytes=plan.data_capacity(batches, config.emb_dim),
                safety_mode=safety_mode,
                wait_timeout_s=wait_timeout_s,
            ),
        )
        ctx = cls(comm, model, plan, bls, ref)
        for index, batch in enumerate(batches):
            batch.check(config.table_rows)
            start, end = plan.row_range(batch.batch_size, comm.rank)
            ctx.routed.append(
                await route_lookups(ctx, index, batch.rows(start, end), batch.batch_size)
            )
        ctx.logger.debug(
            f"rank {comm.rank}: {len(model.tables)} tables ({model.nbytes} B), "
            f"{len(ctx.routed)} batches routed"
        )
        return ctx

    def lookup(self, routed: RoutedBatch) -> typing.List[bytes]:
        """The owner side of one exchange: looked-up rows for every requester."""
        segments = []
        for per_table in routed.requests:
            parts = [
                gather_rows(self.model.tables[t], indices, t).tobytes()
                for t, (_, indices) in zip(self.plan.tables_of(self.rank), per_table)
            ]
            segments.append(b"".join(parts))
        return segments

    def pooled(self, routed: RoutedBatch, result: RecvResult) -> typing.List[np.ndarray]:
        """The requester side: sum-pool the rows received from each owner, in table order."""
        emb_dim = self.model.config.emb_dim
        ly = []
        for owner, segment in enumerate(result.segments):
            rows = _read(segment, np.float32, len(segment) // FLOAT_BYTES, 0).reshape(-1, emb_dim)
            cursor = 0
            for t in self.plan.tables_of(owner):
                lengths = routed.local_lengths[t]
                count = int(lengths.sum())
                ly.append(pool_rows(rows[cursor : cursor + count], lengths, emb_dim))
                cursor += count
        return ly

    def predict(self, x: np.ndarray, routed: RoutedBatch, result: RecvResult) -> Prediction:
        return top_mlp(self.model, interact_features(x, self.pooled(routed, result)))


def _read(segment: bytes, dtype, count: int, offset: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=dtype)
    if offset + count * np.dtype(dtype).itemsize > len(segment):
        raise ProtocolError(f"segment of {len(segment)} B too short at offset {offset}")
    return np.frombuffer(segment, dtype=dtype, count=count, offset=offset)


def _pack_requests(batch: InferenceBatch, tables: typing.Iterable[int]) -> bytes:
    parts = []
    for t in tables:
        parts.append(batch.lengths[t].astype("<i4").tobytes())
        parts.append(batch.indices[t].astype("<i8").tobytes())
    return b"".join(parts)


def _unpack_requests(
    segment: bytes, rows: int, tables: typing.Iterable[int]
) -> typing.List[typing.Tuple[np.ndarray, np.ndarray]]:
    out, cursor = [], 0
    for _ in tables:
        lengths = _read(segment, "<i4", rows, cursor).astype(np.int32)
        cursor += rows * 4
        count = int(lengths.sum())
        indices = _read(segment, "<i8", count, cursor).astype(np.int64)
        cursor += count * 8
        out.append((lengths, indices))
    if cursor != len(segment):
        raise ProtocolError(f"routing segment has {len(segment) - cursor} trailing bytes")
    return out


async def route_lookups(
    ctx: RankContext, index: int, minibatch: InferenceBatch, batch_size: int
) -> RoutedBatch:
    """
    Ship each table owner the lengths and indices of this rank's samples,
    over one blocking exchange. Runs before timing.
    """
    plan = ctx.plan
    size = ctx.comm.comm_size
    send = [_pack_requests(minibatch, plan.tables_of(owner)) for owner in range(size)]
    result = await ref_alltoallv(ctx.ref, send)
    row_counts = plan.row_counts(batch_size)
    requests = [
        _unpack_requests(segment, row_counts[source], plan.tables_of(ctx.rank))
        for source, segment in enumerate(result.segments)
    ]
    emb_bytes = ctx.model.config.emb_dim * FLOAT_BYTES
    recv_lengths = [
        sum(int(minibatch.lengths[t].sum()) for t in plan.tables_of(owner)) * emb_bytes
        for owner in range(size)
    ]
    return RoutedBatch(index, minibatch.dense, list(minibatch.lengths), requests, recv_lengths)


async def forward_sync(
    ctx: RankContext,
    recorder: typing.Optional[RankRecorder] = None,
    delays: typing.Optional[typing.Sequence[float]] = None,
) -> typing.List[Prediction]:
    """The original per-batch loop: one exchange in flight, overlapped only with the bottom MLP."""
    bls = ctx.bls
    predictions: typing.List[Prediction] = []
    with timed_phase():
        for routed in ctx.routed:
            j = routed.index
            delay = _delay(delays, j)
            if recorder:
                recorder.begin(j)
            if delay:
                await asyncio.sleep(delay)
            await bls.initiate(ctx.lookup(routed), routed.recv_lengths)
            x = bottom_mlp(ctx.model, routed.dense)
            result = await bls.wait()
            predictions.append(ctx.predict(x, routed, result))
            if recorder:
                recorder.end(j, delay)
    return predictions


async def forward_bls(
    ctx: RankContext,
    bound_k: int,
    recorder: typing.Optional[RankRecorder] = None,
    delays: typing.Optional[typing.Sequence[float]] = None,
) -> typing.List[Prediction]:
    """
    Bounded lag loop: up to ``bound_k`` exchanges stay unfinished across
    batches. Each CTR is computed with the bottom MLP output of its own batch,
    kept in a FIFO alongside the request FIFO.
    """
    bls = ctx.bls
    if bound_k > bls.config.bound_k:
        raise ProtocolError(f"bound {bound_k} exceeds the context bound {bls.config.bound_k}")
    predictions: typing.List[typing.Optional[Prediction]] = [None] * len(ctx.routed)
    pending: typing.Deque[typing.Tuple[RoutedBatch, np.ndarray]] = collections.deque()

    async def finish_oldest() -> None:
        result = await bls.wait()
        routed, x = pending.popleft()
        predictions[routed.index] = ctx.predict(x, routed, result)

    with timed_phase():
        for n, routed in enumerate(ctx.routed):
            j = routed.index
            delay = _delay(delays, j)
            if recorder:
                recorder.begin(j)
            if delay:
                await asyncio.sleep(delay)
            await bls.initiate(ctx.lookup(routed), routed.recv_lengths)
            x = bottom_mlp(ctx.model, routed.dense)
            pending.append((routed, x))
            if bls.outstanding > bound_k:
                await finish_oldest()
            if n == len(ctx.routed) - 1:
                while bls.outstanding > 0:
                    await finish_oldest()
            if recorder:
                recorder.end(j, delay)
    return predictions


def _delay(delays: typing.Optional[typing.Sequence[float]], j: int) -> float:
    if delays is None or j >= len(delays):
        return 0.0
    return float(delays[j])
