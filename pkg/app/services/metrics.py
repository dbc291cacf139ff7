import collections
import csv
import dataclasses
import itertools
import logging
import math
import time
import typing
from pathlib import Path

import numpy as np
from scipy import stats

from app.services.errors import MetricsError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class LatencySample:
    run: int
    rank: int
    iteration: int
    latency_s: float
    delay_injected_s: float = 0.0


@dataclasses.dataclass(frozen=True)
class TraceEntry:
    run: int
    rank: int
    iteration: int
    t_ns: int


@dataclasses.dataclass(frozen=True)
class SummaryRow:
    workload: str
    backend_mode: str
    bound_k: int
    latency_mean: float
    latency_ci95: float
    throughput_mean: float
    throughput_ci95: float
    max_lag: int


@dataclasses.dataclass(frozen=True)
class A2APoint:
    sweep: str
    mode: str
    ranks: int
    bound_k: int
    size_bytes: int
    iters: int
    total_s: float
    per_call_s: float


class RankRecorder:
    """Per-batch latency of one rank in one run, on the monotonic clock."""

    def __init__(self, run: int, rank: int) -> None:
        self.run = run
        self.rank = rank
        self.samples: typing.List[LatencySample] = []
        self._start: typing.Optional[int] = None

    def begin(self, iteration: int) -> None:
        self._start = time.monotonic_ns()

    def end(self, iteration: int, delay_s: float = 0.0) -> None:
        if self._start is None:
            raise MetricsError(f"end({iteration}) without begin")
        elapsed = (time.monotonic_ns() - self._start) / 1e9
        self._start = None
        self.samples.append(LatencySample(self.run, self.rank, iteration, elapsed, delay_s))


@dataclasses.dataclass
class RunMetrics:
    num_batches: int
    # Mean batch latency per (run, rank).
    latency: typing.Dict[typing.Tuple[int, int], float]
    # Summed per-rank throughput per run.
    throughput: typing.Dict[int, float]
    latency_mean: float
    latency_ci95: float
    throughput_mean: float
    throughput_ci95: float

    @property
    def runs(self) -> int:
        return len(self.throughput)


def confidence_interval(values: typing.Sequence[float], confidence: float = 0.95) -> float:
    """Student-t half-width of the mean; 0 for fewer than two values or no spread."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        return 0.0
    sd = values.std(ddof=1)
    if sd == 0:
        return 0.0
    return float(stats.t.ppf((1 + confidence) / 2, n - 1) * sd / math.sqrt(n))


def aggregate(samples: typing.Iterable[LatencySample], num_batches: int) -> RunMetrics:
    """
    L(i, j) is the mean batch latency of rank j in run i and
    T(i) = sum_j num_batches / L(i, j). Means and CIs are taken over runs.
    """
    groups: typing.Dict[typing.Tuple[int, int], typing.List[float]] = collections.defaultdict(list)
    for s in samples:
        groups[(s.run, s.rank)].append(s.latency_s)
    if not groups:
        raise MetricsError("no latency samples")

    ranks_per_run: typing.Dict[int, typing.Set[int]] = collections.defaultdict(set)
    latency = {}
    for (run, rank), values in sorted(groups.items()):
        if len(values) != num_batches:
            raise MetricsError(
                f"run {run} rank {rank}: {len(values)} samples, expected {num_batches}"
            )
        mean = math.fsum(values) / len(values)
        if mean <= 0:
            raise MetricsError(f"run {run} rank {rank}: non-positive mean latency {mean}")
        latency[(run, rank)] = mean
        ranks_per_run[run].add(rank)

    rank_sets = {frozenset(r) for r in ranks_per_run.values()}
    if len(rank_sets) != 1:
        raise MetricsError("runs cover different rank sets")

    throughput = {
        run: math.fsum(num_batches / latency[(run, rank)] for rank in sorted(ranks))
        for run, ranks in sorted(ranks_per_run.items())
    }
    run_latency = [
        math.fsum(latency[(run, rank)] for rank in ranks) / len(ranks)
        for run, ranks in sorted(ranks_per_run.items())
    ]
    return RunMetrics(
        num_batches=num_batches,
        latency=latency,
        throughput=throughput,
        latency_mean=math.fsum(latency.values()) / len(latency),
        latency_ci95=confidence_interval(run_latency),
        throughput_mean=math.fsum(throughput.values()) / len(throughput),
        throughput_ci95=confidence_interval(list(throughput.values())),
    )


@dataclasses.dataclass(frozen=True)
class LagReport:
    max_lag: int
    bound_k: int

    @property
    def limit(self) -> int:
        return self.bound_k + 1

    @property
    def passed(self) -> bool:
        return self.max_lag <= self.limit


def check_lag(
    traces: typing.Mapping[int, typing.Sequence[typing.Tuple[int, int]]], bound_k: int
) -> LagReport:
    """
    Replays the merged initiation traces ``rank -> [(iteration, t_ns)]`` in
    time order and reports the largest spread between the latest iterations
    initiated by any two ranks. Initiations with equal timestamps are applied
    together.
    """
    latest = {}
    events = []
    for rank, trace in traces.items():
        if trace:
            latest[rank] = min(it for it, _ in trace) - 1
        for iteration, t_ns in trace:
            events.append((t_ns, rank, iteration))
    if not latest:
        return LagReport(0, bound_k)
    start = min(latest.values())
    for rank in traces:
        latest.setdefault(rank, start)

    max_lag = 0
    for _, group in itertools.groupby(sorted(events), key=lambda e: e[0]):
        for _, rank, iteration in group:
            latest[rank] = max(latest[rank], iteration)
        max_lag = max(max_lag, max(latest.values()) - min(latest.values()))
    return LagReport(max_lag, bound_k)


Trace = typing.List[typing.Tuple[int, int]]


def traces_by_run(entries: typing.Iterable[TraceEntry]) -> typing.Dict[int, typing.Dict[int, Trace]]:
    out: typing.Dict[int, typing.Dict[int, Trace]] = collections.defaultdict(
        lambda: collections.defaultdict(list)
    )
    for e in entries:
        out[e.run][e.rank].append((e.iteration, e.t_ns))
    return out


def max_lag(entries: typing.Iterable[TraceEntry], bound_k: int) -> LagReport:
    """Worst lag over all runs of a trace."""
    reports = [check_lag(traces, bound_k) for traces in traces_by_run(entries).values()]
    return max(reports, key=lambda r: r.max_lag, default=LagReport(0, bound_k))


Row = typing.TypeVar("Row")


def _write_rows(path: Path, rows: typing.Sequence, row_type: typing.Type, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = [f.name for f in dataclasses.fields(row_type)]
    write_header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        if write_header:
            writer.writeheader()
        for row in rows:
            writer.writerow(dataclasses.asdict(row))


def _read_rows(path: Path, row_type: typing.Type[Row]) -> typing.List[Row]:
    fields = {f.name: f.type for f in dataclasses.fields(row_type)}
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(fields) - set(reader.fieldnames or [])
        if missing:
            raise MetricsError(f"{path}: missing columns {sorted(missing)}")
        for line_no, record in enumerate(reader, start=2):
            try:
                rows.append(row_type(**{name: cast(record[name]) for name, cast in fields.items()}))
            except (TypeError, ValueError) as e:
                raise MetricsError(f"{path}:{line_no}: {e}") from None
    return rows


def write_metrics_csv(path: Path, samples: typing.Sequence[LatencySample], append: bool = False) -> None:
    _write_rows(path, samples, LatencySample, append)


def read_metrics_csv(path: Path) -> typing.List[LatencySample]:
    return _read_rows(path, LatencySample)


def write_summary_csv(path: Path, rows: typing.Sequence[SummaryRow], append: bool = True) -> None:
    _write_rows(path, rows, SummaryRow, append)


def read_summary_csv(path: Path) -> typing.List[SummaryRow]:
    return _read_rows(path, SummaryRow)


def write_trace_csv(path: Path, entries: typing.Sequence[TraceEntry], append: bool = False) -> None:
    _write_rows(path, entries, TraceEntry, append)


def read_trace_csv(path: Path) -> typing.List[TraceEntry]:
    return _read_rows(path, TraceEntry)


def write_a2a_csv(path: Path, points: typing.Sequence[A2APoint], append: bool = False) -> None:
    _write_rows(path, points, A2APoint, append)


def read_a2a_csv(path: Path) -> typing.List[A2APoint]:
    return _read_rows(path, A2APoint)
