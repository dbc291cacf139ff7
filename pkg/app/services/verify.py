import asyncio
import dataclasses
import logging
import math
import typing

import numpy as np

from app.services.collective import (
    BlsConfig,
    RecvResult,
    RefAlltoallv,
    SafetyMode,
    bls_init,
)
from app.services.comm import create_comm
from app.services.dlrm import DlrmModel, ModelConfig, RankContext, forward_bls, forward_local, forward_sync
from app.services.errors import BlsError, HazardError
from app.services.metrics import check_lag
from app.services.transport import BaseTransport
from app.services.utils import checksum
from app.services.workloads import WorkloadKind, WorkloadSpec, generate

logger = logging.getLogger(__name__)

ACKED_SCHEDULES = 1000


@dataclasses.dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""


def payload(seed: int, iteration: int, source: int, dest: int, max_bytes: int) -> bytes:
    """Deterministic segment of random length in ``[0, max_bytes]``."""
    rng = np.random.default_rng([seed, iteration, source, dest])
    size = int(rng.integers(0, max_bytes + 1))
    return rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()


def expected_segments(seed: int, iteration: int, rank: int, comm_size: int, max_bytes: int) -> typing.List[bytes]:
    return [payload(seed, iteration, source, rank, max_bytes) for source in range(comm_size)]


async def _yield(rng: typing.Optional[np.random.Generator], most: int) -> None:
    if rng is None:
        return
    for _ in range(int(rng.integers(0, most + 1))):
        await asyncio.sleep(0)


async def exchange_rounds(
    handle: BaseTransport,
    rounds: int,
    seed: int,
    max_bytes: int,
    bound_k: typing.Optional[int] = 0,
    safety: SafetyMode = SafetyMode.ACKED,
    jitter: int = 0,
) -> typing.Tuple[typing.List[RecvResult], typing.List[typing.Tuple[int, int]]]:
    """
    Runs ``rounds`` exchanges of deterministic payloads on one rank with the
    bounded-lag loop guard, or with the blocking reference when ``bound_k``
    is None. ``jitter`` adds seeded per-rank scheduling noise.
    """
    size = handle.comm_size
    rng = np.random.default_rng([seed, 1000 + handle.rank]) if jitter else None
    if bound_k is None:
        ref = await RefAlltoallv.init(handle, max_bytes)
        results = []
        for j in range(rounds):
            await _yield(rng, jitter)
            send = [payload(seed, j, handle.rank, dest, max_bytes) for dest in range(size)]
            results.append(await ref(send))
        return results, []

    ctx = await bls_init(
        handle, BlsConfig(bound_k=bound_k, per_peer_bytes=max_bytes, safety_mode=safety)
    )
    results = []
    for j in range(rounds):
        await _yield(rng, jitter)
        send = [payload(seed, j, handle.rank, dest, max_bytes) for dest in range(size)]
        recv = [len(payload(seed, j, source, handle.rank, max_bytes)) for source in range(size)]
        await ctx.initiate(send, recv)
        if ctx.outstanding > bound_k:
            results.append(await ctx.wait())
    results += await ctx.drain()
    await handle.fence()
    return results, list(ctx.trace)


def _content_ok(results: typing.Sequence[RecvResult], seed: int, rank: int, size: int, max_bytes: int) -> bool:
    for j, result in enumerate(results):
        expected = expected_segments(seed, j, rank, size, max_bytes)
        if result.iteration != j or result.checksums() != [checksum(s) for s in expected]:
            return False
    return True


async def check_zero_bound(ranks: int, seed: int, rounds: int = 100, max_bytes: int = 512) -> PropertyResult:
    """Bound 0 delivers exactly what the blocking reference delivers."""
    outcome = {}
    for name, bound in (("bls", 0), ("ref", None)):
        comm = await create_comm(ranks)
        try:
            outcome[name] = await comm.run(exchange_rounds, rounds, seed, max_bytes, bound)
        finally:
            await comm.close()
    same = all(
        [r.segments for r in bls[0]] == [r.segments for r in ref[0]]
        for bls, ref in zip(outcome["bls"], outcome["ref"])
    )
    return PropertyResult("zero-bound equivalence", same, f"{rounds} exchanges on {ranks} ranks")


async def check_conservation(ranks: int, seed: int, bound_k: int = 2, rounds: int = 40) -> PropertyResult:
    """Every segment arrives as sent; fences cross-check per-pair byte counts."""
    max_bytes = 256
    comm = await create_comm(ranks, seed=seed, jitter=3)
    try:
        outcome = await comm.run(exchange_rounds, rounds, seed, max_bytes, bound_k, SafetyMode.ACKED, 3)
    finally:
        await comm.close()
    ok = all(_content_ok(res, seed, rank, ranks, max_bytes) for rank, (res, _) in enumerate(outcome))
    return PropertyResult("exchange conservation", ok, f"{rounds} rounds, checked by content and fence")


async def check_lag_bound(ranks: int, seed: int, bounds: typing.Sequence[int] = (0, 1, 2, 4)) -> PropertyResult:
    details, ok = [], True
    for k in bounds:
        comm = await create_comm(ranks, seed=seed, jitter=2)
        try:
            outcome = await comm.run(exchange_rounds, 30, seed, 64, k, SafetyMode.ACKED, 4)
        finally:
            await comm.close()
        report = check_lag({rank: trace for rank, (_, trace) in enumerate(outcome)}, k)
        ok &= report.passed
        details.append(f"k={k}: lag {report.max_lag}")
    return PropertyResult("lag bound", ok, ", ".join(details))


def acked_schedule_seeds(seeds: typing.Sequence[int], total: int = ACKED_SCHEDULES) -> typing.List[int]:
    """At least ``total`` distinct schedule seeds, spread evenly over ``seeds``."""
    unique = list(dict.fromkeys(seeds)) or [0]
    per_seed = math.ceil(total / len(unique))
    return [s * per_seed + i for s in unique for i in range(per_seed)]


async def check_acked_safety(ranks: int, seeds: typing.Iterable[int], bound_k: int = 2) -> PropertyResult:
    """Randomized delivery schedules never trip the hazard detector in acked mode."""
    count = 0
    for seed in seeds:
        comm = await create_comm(ranks, seed=seed, jitter=4)
        try:
            await comm.run(exchange_rounds, 12, seed, 32, bound_k, SafetyMode.ACKED, 4)
        except HazardError as e:
            return PropertyResult("acked safety", False, f"schedule {seed}: {e}")
        finally:
            await comm.close()
        count += 1
    return PropertyResult("acked safety", True, f"{count} randomized schedules")


async def provoke_hazard() -> HazardError:
    """
    Two ranks, bound 1, one slot. Rank 1 initiates iteration 0 and stalls;
    rank 0 initiates 0 and 1, so its second put lands in rank 1's only slot
    before rank 1 copied iteration 0 out.
    """
    comm = await create_comm(2)
    try:
        config = BlsConfig(bound_k=1, per_peer_bytes=8, slot_count=1)
        fast, frozen = await asyncio.gather(bls_init(comm.handle(0), config), bls_init(comm.handle(1), config))
        await frozen.initiate([b"f0", b"f0"])
        await fast.initiate([b"a0", b"a0"])
        await fast.initiate([b"a1", b"a1"])
        await comm.fabric.quiesce()
        try:
            await frozen.wait()
        except HazardError as e:
            return e
        raise BlsError("slot overwrite went undetected")
    finally:
        await comm.close()


async def check_faithful_hazard() -> PropertyResult:
    try:
        error = await provoke_hazard()
    except BlsError as e:
        return PropertyResult("faithful hazard detection", False, str(e))
    return PropertyResult("faithful hazard detection", True, str(error))


def small_model(seed: int, num_tables: int = 5, rows: int = 50) -> ModelConfig:
    return ModelConfig(
        emb_dim=4,
        num_dense=3,
        table_rows=[rows + t for t in range(num_tables)],
        bottom_mlp_dims=[6, 4],
        top_mlp_dims=[5, 1],
        seed=seed,
    )


async def run_model(
    ranks: int,
    config: ModelConfig,
    batches,
    bound_k: typing.Optional[int],
    safety: SafetyMode = SafetyMode.ACKED,
) -> typing.List[np.ndarray]:
    """Full-batch CTRs from the distributed loop; ``bound_k`` None runs the sync loop."""

    async def rank_loop(handle: BaseTransport):
        ctx = await RankContext.create(handle, config, batches, bound_k=bound_k or 0, safety_mode=safety)
        if bound_k is None:
            return await forward_sync(ctx)
        return await forward_bls(ctx, bound_k)

    comm = await create_comm(ranks)
    try:
        per_rank = await comm.run(rank_loop)
    finally:
        await comm.close()
    return [np.concatenate([per_rank[r][b].ctr for r in range(ranks)]) for b in range(len(batches))]


async def check_equivalence(ranks: int, seed: int, bounds: typing.Sequence[int] = (0, 1, 2, 4)) -> PropertyResult:
    """Local oracle, sync loop and every bounded-lag loop agree bit for bit."""
    config = small_model(seed)
    spec = WorkloadSpec(
        kind=WorkloadKind.HETERO,
        batch_size=4 * ranks,
        num_batches=6,
        num_dense=config.num_dense,
        table_rows=config.table_rows,
        max_multiplicity=5,
        comm_size=ranks,
        seed=seed,
    )
    batches = generate(spec).batches
    model = DlrmModel(config)
    oracle = [forward_local(model, b).ctr for b in batches]
    sync = await run_model(ranks, config, batches, None)
    mismatched = []
    if not all(np.array_equal(a, b) for a, b in zip(oracle, sync)):
        mismatched.append("sync")
    for k in bounds:
        got = await run_model(ranks, config, batches, k)
        if not all(np.array_equal(a, b) for a, b in zip(sync, got)):
            mismatched.append(f"k={k}")
    return PropertyResult(
        "prediction equivalence",
        not mismatched,
        f"mismatch: {', '.join(mismatched)}" if mismatched else f"bounds {list(bounds)} on {ranks} ranks",
    )


async def run_verify(ranks: int, seeds: typing.Sequence[int]) -> typing.List[PropertyResult]:
    results = []
    for seed in seeds:
        results.append(await check_equivalence(ranks, seed))
        results.append(await check_zero_bound(ranks, seed))
        results.append(await check_lag_bound(ranks, seed))
        results.append(await check_conservation(ranks, seed))
    results.append(await check_acked_safety(ranks, acked_schedule_seeds(seeds)))
    results.append(await check_faithful_hazard())
    for r in results:
        logger.info(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return results
