import asyncio
import enum
import logging
import subprocess
import sys
import time
import typing
from pathlib import Path

import numpy as np
from pydantic.v1 import BaseModel, validator

from app.services.collective import (
    BlsConfig,
    RefAlltoallv,
    SafetyMode,
    bls_init,
    compute_bls_overhead,
)
from app.services.comm import Communicator, create_comm
from app.services.dlrm import ModelConfig, RankContext, forward_bls, forward_sync
from app.services.errors import CommError, ConfigError, ProtocolError
from app.services.metrics import (
    A2APoint,
    LatencySample,
    RankRecorder,
    SummaryRow,
    TraceEntry,
    aggregate,
    max_lag,
    read_a2a_csv,
    read_metrics_csv,
    read_trace_csv,
    write_a2a_csv,
    write_metrics_csv,
    write_summary_csv,
    write_trace_csv,
)
from app.services.plots import SWEEP_ITERS, SWEEP_SIZE, plot_a2a, plot_bound_sweep
from app.services.tcp import parse_endpoint
from app.services.transport import Backend, BaseTransport
from app.services.utils import digest
from app.services.workloads import (
    LAYOUTS,
    WorkloadKind,
    WorkloadSpec,
    default_table_rows,
    generate,
)
from app.settings import get_settings

logger = logging.getLogger(__name__)

MAX_A2A_SIZE = 16 * 1024 * 1024
MAX_A2A_ITERS = 10_000


class A2AMode(enum.Enum):
    BLS = "bls"
    REF = "ref"


class LoopMode(enum.Enum):
    SYNC = "sync"
    BLS = "bls"


class RunTarget(BaseModel):
    """Where the ranks of a run live."""

    ranks: int = 8
    backend: Backend = Backend.IN_PROCESS
    endpoints: typing.Optional[typing.List[str]] = None
    rank: typing.Optional[int] = None
    out: Path = Path("results")

    class Config:
        frozen = True

    @validator("ranks")
    def _ranks_positive(cls, v):
        if v < 1:
            raise ValueError("ranks must be >= 1")
        return v

    @validator("endpoints", always=True)
    def _endpoints_for_tcp(cls, v, values):
        if values.get("backend") == Backend.TCP:
            if v is None or len(v) != values.get("ranks"):
                raise ValueError(f"tcp backend needs exactly {values.get('ranks')} endpoints")
        return v

    @validator("rank")
    def _rank_in_range(cls, v, values):
        if v is not None and not 0 <= v < values.get("ranks", 0):
            raise ValueError("rank out of range")
        return v

    @property
    def is_child(self) -> bool:
        return self.backend == Backend.TCP and self.rank is not None

    async def connect(self, session: int, seed: typing.Optional[int] = None) -> Communicator:
        endpoints = None
        if self.backend == Backend.TCP:
            endpoints = shift_endpoints(self.endpoints, session * self.ranks)
        return await create_comm(
            self.ranks, self.backend, endpoints=endpoints, rank=self.rank, seed=seed
        )


class A2AConfig(BaseModel):
    modes: typing.List[A2AMode] = [A2AMode.BLS, A2AMode.REF]
    bounds: typing.List[int] = [0]
    safety: SafetyMode = SafetyMode.ACKED
    sizes: typing.List[int] = [1, 16, 256, 4096, 32768, 262144, 1048576]
    iters: typing.List[int] = [1, 10, 100, 1000]
    fixed_size: int = 32768
    fixed_iters: int = 100
    seed: int = 0

    class Config:
        frozen = True

    @validator("sizes", each_item=True)
    def _size_cap(cls, v):
        if not 1 <= v <= MAX_A2A_SIZE:
            raise ValueError(f"message sizes must be in [1, {MAX_A2A_SIZE}]")
        return v

    @validator("iters", each_item=True)
    def _iters_cap(cls, v):
        if not 1 <= v <= MAX_A2A_ITERS:
            raise ValueError(f"iteration counts must be in [1, {MAX_A2A_ITERS}]")
        return v

    @validator("bounds", each_item=True)
    def _bound_non_negative(cls, v):
        if v < 0:
            raise ValueError("bounds must be >= 0")
        return v


class DlrmConfig(BaseModel):
    workload: WorkloadKind = WorkloadKind.BALANCED
    modes: typing.List[LoopMode] = [LoopMode.BLS]
    bounds: typing.List[int] = [0]
    safety: SafetyMode = SafetyMode.ACKED
    reference: bool = False
    batches: int = 64
    batch_size: int = 512
    emb_dim: int = 64
    layout: str = "criteo"
    tables: typing.Optional[int] = None
    table_rows: typing.Optional[typing.List[int]] = None
    bottom_mlp: typing.List[int] = [512, 256]
    top_mlp: typing.List[int] = [512, 256]
    max_mult: int = 100
    delay_max: float = 0.01
    csv_path: typing.Optional[Path] = None
    seed: int = 0
    runs: int = 5

    class Config:
        frozen = True

    @validator("layout")
    def _known_layout(cls, v):
        if v not in LAYOUTS:
            raise ValueError(f"unknown layout {v!r}, expected one of {sorted(LAYOUTS)}")
        return v

    @validator("runs", "batches", "batch_size", "emb_dim")
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("bounds", each_item=True)
    def _bound_non_negative(cls, v):
        if v < 0:
            raise ValueError("bounds must be >= 0")
        return v

    @property
    def num_tables(self) -> int:
        if self.table_rows is not None:
            return len(self.table_rows)
        return self.tables if self.tables is not None else LAYOUTS[self.layout].num_tables

    @property
    def num_dense(self) -> int:
        return LAYOUTS[self.layout].num_dense

    def rows(self) -> typing.List[int]:
        if self.table_rows is not None:
            return list(self.table_rows)
        return default_table_rows(self.num_tables, self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            emb_dim=self.emb_dim,
            num_dense=self.num_dense,
            table_rows=self.rows(),
            bottom_mlp_dims=list(self.bottom_mlp) + [self.emb_dim],
            top_mlp_dims=list(self.top_mlp) + [1],
            seed=self.seed,
        )

    def workload_spec(self, comm_size: int) -> WorkloadSpec:
        return WorkloadSpec(
            kind=self.workload,
            batch_size=self.batch_size,
            num_batches=self.batches,
            num_dense=self.num_dense,
            table_rows=self.rows(),
            max_multiplicity=self.max_mult if self.workload == WorkloadKind.HETERO else 1,
            delay_max_s=self.delay_max if self.workload == WorkloadKind.DELAYS else 0.0,
            comm_size=comm_size,
            seed=self.seed,
            csv_path=self.csv_path,
        )

    def points(self) -> typing.List[typing.Tuple[LoopMode, int]]:
        """Every (loop mode, bound) to run; sync runs only at bound 0."""
        points = []
        if self.reference or LoopMode.SYNC in self.modes:
            points.append((LoopMode.SYNC, 0))
        if LoopMode.BLS in self.modes:
            points.extend((LoopMode.BLS, k) for k in self.bounds)
        return points

    def backend_mode(self, backend: Backend, mode: LoopMode) -> str:
        if mode == LoopMode.SYNC:
            return f"{backend.value}/sync"
        return f"{backend.value}/bls-{self.safety.value}"


def shift_endpoints(endpoints: typing.Sequence[str], offset: int) -> typing.List[str]:
    """The same hosts with every port moved by ``offset``; one port block per communicator."""
    shifted = []
    for endpoint in endpoints:
        host, port = parse_endpoint(endpoint)
        shifted.append(f"{host}:{port + offset}")
    return shifted


def _segments(seed: int, rank: int, comm_size: int, size: int) -> typing.List[bytes]:
    rng = np.random.default_rng([seed, rank])
    return [rng.integers(0, 256, size=size, dtype=np.uint8).tobytes() for _ in range(comm_size)]


async def _a2a_rank(
    handle: BaseTransport,
    mode: A2AMode,
    bound_k: int,
    safety: SafetyMode,
    size: int,
    iters: int,
    seed: int,
) -> float:
    wait_timeout = get_settings().wait_timeout_s
    send = _segments(seed, handle.rank, handle.comm_size, size)
    if mode == A2AMode.REF:
        ref = await RefAlltoallv.init(handle, size, wait_timeout)
        await handle.fence()
        start = time.perf_counter()
        for _ in range(iters):
            await ref(send)
        return time.perf_counter() - start

    ctx = await bls_init(
        handle,
        BlsConfig(bound_k=bound_k, per_peer_bytes=size, safety_mode=safety, wait_timeout_s=wait_timeout),
    )
    await handle.fence()
    start = time.perf_counter()
    for _ in range(iters):
        await ctx.initiate(send)
        if ctx.outstanding > bound_k:
            await ctx.wait()
    await ctx.drain()
    elapsed = time.perf_counter() - start
    await handle.fence()
    return elapsed


async def run_a2a(target: RunTarget, config: A2AConfig) -> typing.List[A2APoint]:
    """
    Size sweep at ``fixed_iters`` and iteration sweep at ``fixed_size``, per
    mode and bound. Every point runs on a fresh communicator and is abandoned
    once it exceeds the run budget.
    """
    budget = get_settings().BLS_RUN_BUDGET_S
    plan = []
    for mode in config.modes:
        for bound_k in config.bounds if mode == A2AMode.BLS else [0]:
            plan += [(SWEEP_SIZE, mode, bound_k, size, config.fixed_iters) for size in config.sizes]
            plan += [(SWEEP_ITERS, mode, bound_k, config.fixed_size, iters) for iters in config.iters]

    points = []
    for session, (sweep, mode, bound_k, size, iters) in enumerate(plan):
        comm = await target.connect(session)
        try:
            totals = await asyncio.wait_for(
                comm.run(_a2a_rank, mode, bound_k, config.safety, size, iters, config.seed), budget
            )
        except asyncio.TimeoutError:
            logger.error(f"{mode.value} k={bound_k} size={size} iters={iters}: exceeded {budget:.0f}s budget, skipped")
            continue
        except CommError as e:
            logger.error(f"{mode.value} k={bound_k} size={size} iters={iters}: aborted: {e}")
            continue
        finally:
            await comm.close()
        total = max(totals)
        points.append(
            A2APoint(sweep, mode.value, target.ranks, bound_k, size, iters, total, total / iters)
        )
        logger.info(f"{sweep} sweep {mode.value} k={bound_k}: {size} B x {iters} -> {total:.6f}s")
    return points


def merge_a2a(parts: typing.Sequence[typing.Sequence[A2APoint]]) -> typing.List[A2APoint]:
    """One point per sweep coordinate, timed by its slowest rank."""
    merged: typing.Dict[tuple, A2APoint] = {}
    for part in parts:
        for p in part:
            key = (p.sweep, p.mode, p.ranks, p.bound_k, p.size_bytes, p.iters)
            if key not in merged or p.total_s > merged[key].total_s:
                merged[key] = p
    return list(merged.values())


async def _dlrm_rank(
    handle: BaseTransport,
    config: DlrmConfig,
    model_config: ModelConfig,
    workload,
    mode: LoopMode,
    bound_k: int,
) -> typing.Tuple[typing.List[LatencySample], typing.List[TraceEntry], bytes]:
    ctx = await RankContext.create(
        handle,
        model_config,
        workload.batches,
        bound_k=bound_k,
        safety_mode=config.safety,
        wait_timeout_s=get_settings().wait_timeout_s,
    )
    delays = workload.delays_for(handle.rank)
    samples, traces = [], []
    fingerprint = b""
    for run in range(config.runs):
        recorder = RankRecorder(run, handle.rank)
        first = len(ctx.bls.trace)
        await handle.fence()
        if mode == LoopMode.SYNC:
            predictions = await forward_sync(ctx, recorder, delays)
        else:
            predictions = await forward_bls(ctx, bound_k, recorder, delays)
        await handle.fence()
        samples += recorder.samples
        traces += [TraceEntry(run, handle.rank, it, t) for it, t in ctx.bls.trace[first:]]
        if run == 0:
            fingerprint = digest(*(p.ctr.tobytes() for p in predictions))
    return samples, traces, fingerprint


def point_dir(out: Path, workload: WorkloadKind, mode: LoopMode, bound_k: int) -> Path:
    return Path(out) / f"{workload.value}-{mode.value}-k{bound_k}"


async def run_dlrm(target: RunTarget, config: DlrmConfig) -> typing.List[SummaryRow]:
    model_config = config.model_config()
    workload = generate(config.workload_spec(target.ranks))
    if not workload.batches:
        raise ConfigError("workload has no batches")
    logger.info(
        f"{config.workload.value}: {len(workload.batches)} batches of {config.batch_size}, "
        f"{model_config.num_tables} tables on {target.ranks} ranks"
    )
    for k in sorted(set(config.bounds)):
        overhead = compute_bls_overhead(k, config.emb_dim * 4, config.batch_size, model_config.num_tables)
        logger.info(f"bound {k}: extra collective memory {overhead / 1024:.0f} KiB per process")

    rows, fingerprints = [], {}
    for session, (mode, bound_k) in enumerate(config.points()):
        comm = await target.connect(session)
        try:
            results = await comm.run(_dlrm_rank, config, model_config, workload, mode, bound_k)
        finally:
            await comm.close()
        out = point_dir(target.out, config.workload, mode, bound_k)
        suffix = f".rank{target.rank}" if target.is_child else ""
        write_metrics_csv(out / f"dlrm_metrics{suffix}.csv", [s for r in results for s in r[0]])
        write_trace_csv(out / f"lag_trace{suffix}.csv", [t for r in results for t in r[1]])
        fingerprints[(mode, bound_k)] = [r[2] for r in results]
        if not target.is_child:
            rows.append(summarize_point(target, config, mode, bound_k, len(workload.batches)))

    reference = fingerprints.get((LoopMode.SYNC, 0))
    if reference is not None:
        for (mode, bound_k), fp in fingerprints.items():
            if fp != reference:
                raise ProtocolError(f"{mode.value} k={bound_k}: predictions differ from the sync reference")
        logger.info("predictions identical to the sync reference at every bound")
    return rows


def summarize_point(
    target: RunTarget, config: DlrmConfig, mode: LoopMode, bound_k: int, num_batches: int
) -> SummaryRow:
    out = point_dir(target.out, config.workload, mode, bound_k)
    metrics = aggregate(read_metrics_csv(out / "dlrm_metrics.csv"), num_batches)
    lag = max_lag(read_trace_csv(out / "lag_trace.csv"), bound_k)
    if not lag.passed:
        logger.error(f"{mode.value} k={bound_k}: observed lag {lag.max_lag} exceeds {lag.limit}")
    row = SummaryRow(
        workload=config.workload.value,
        backend_mode=config.backend_mode(target.backend, mode),
        bound_k=bound_k,
        latency_mean=metrics.latency_mean,
        latency_ci95=metrics.latency_ci95,
        throughput_mean=metrics.throughput_mean,
        throughput_ci95=metrics.throughput_ci95,
        max_lag=lag.max_lag,
    )
    logger.info(
        f"{row.backend_mode} k={bound_k}: latency {row.latency_mean * 1e3:.3f} "
        f"+/- {row.latency_ci95 * 1e3:.3f} ms, throughput {row.throughput_mean:.1f} batches/s, "
        f"max lag {row.max_lag}"
    )
    return row


def merge_dlrm_parts(target: RunTarget, config: DlrmConfig) -> None:
    for mode, bound_k in config.points():
        out = point_dir(target.out, config.workload, mode, bound_k)
        samples, traces = [], []
        for rank in range(target.ranks):
            samples += read_metrics_csv(out / f"dlrm_metrics.rank{rank}.csv")
            traces += read_trace_csv(out / f"lag_trace.rank{rank}.csv")
        write_metrics_csv(out / "dlrm_metrics.csv", samples)
        write_trace_csv(out / "lag_trace.csv", traces)


def finish_a2a(target: RunTarget, points: typing.Sequence[A2APoint]) -> Path:
    path = Path(target.out) / "a2a.csv"
    write_a2a_csv(path, points)
    plot_a2a(path, target.out)
    return path


def finish_dlrm(target: RunTarget, rows: typing.Sequence[SummaryRow]) -> Path:
    path = Path(target.out) / "summary.csv"
    write_summary_csv(path, rows, append=True)
    plot_bound_sweep(path, target.out)
    return path


def launch_ranks(argv: typing.Sequence[str], ranks: int) -> int:
    """Run one child process per rank with ``--rank r`` appended; the first failing exit code wins."""
    procs = [
        subprocess.Popen([sys.executable, "-m", "app.main", *argv, "--rank", str(rank)])
        for rank in range(ranks)
    ]
    codes = [p.wait() for p in procs]
    failed = [c for c in codes if c != 0]
    if failed:
        logger.error(f"rank processes exited with codes {codes}")
        return failed[0]
    return 0


def merge_a2a_parts(target: RunTarget) -> typing.List[A2APoint]:
    return merge_a2a([read_a2a_csv(Path(target.out) / f"a2a.rank{r}.csv") for r in range(target.ranks)])


def summarize_dlrm(target: RunTarget, config: DlrmConfig) -> typing.List[SummaryRow]:
    rows = []
    for mode, bound_k in config.points():
        samples = read_metrics_csv(point_dir(target.out, config.workload, mode, bound_k) / "dlrm_metrics.csv")
        num_batches = len({s.iteration for s in samples})
        rows.append(summarize_point(target, config, mode, bound_k, num_batches))
    return rows
