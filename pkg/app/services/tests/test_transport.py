import asyncio
import time

import pytest

from app.services.comm import create_comm, run_ranks
from app.services.errors import CommError, CommTimeoutError, ProtocolError, SetupError
from app.services.transport import PutDescriptor


@pytest.fixture
async def comm():
    comm = await create_comm(3, timeout_s=2.0)
    yield comm
    await comm.close()


async def register_all(comm, slot_count=2, per_peer_bytes=8, name="data"):
    return await asyncio.gather(
        *(h.register_window(slot_count, per_peer_bytes, name) for h in comm.handles)
    )


@pytest.mark.asyncio
async def test_puts_land_in_source_segments(comm):
    # Arrange
    await register_all(comm)

    # Act
    for h in comm.handles:
        for dest in range(3):
            h.put(PutDescriptor(dest, slot=1, offset_bytes=0, payload=bytes([h.rank, dest]), tag=1))
    await asyncio.gather(*(h.await_count(1, 2, deadline=1.0) for h in comm.handles))

    # Assert
    for h in comm.handles:
        window = h.window("data")
        for source in range(3):
            assert window.segment(1, source, 0, 2) == bytes([source, h.rank])
        assert window.counter[1] == 0


@pytest.mark.asyncio
async def test_self_put_is_a_local_copy_and_not_counted(comm):
    await register_all(comm)
    h = comm.handle(0)

    h.put(PutDescriptor(0, slot=0, offset_bytes=2, payload=b"abc", tag=0))

    window = h.window("data")
    assert window.segment(0, 0, 2, 5) == b"abc"
    assert window.counter[0] == 0
    assert h.bytes_applied_from[0] == 3


@pytest.mark.asyncio
async def test_await_count_zero_returns_immediately(comm):
    await register_all(comm)
    await comm.handle(1).await_count(0, 0)


@pytest.mark.asyncio
async def test_await_count_times_out_with_observed_count(comm):
    await register_all(comm)
    comm.handle(1).put(PutDescriptor(0, slot=0, offset_bytes=0, payload=b"x", tag=3))

    with pytest.raises(CommTimeoutError) as exc_info:
        await comm.handle(0).await_count(3, 2, deadline=0.2)

    assert exc_info.value.tag == 3
    assert exc_info.value.observed == 1
    assert exc_info.value.expected == 2


@pytest.mark.asyncio
async def test_mismatched_registration_fails_everywhere(comm):
    with pytest.raises(SetupError):
        await run_ranks(
            [
                comm.handle(0).register_window(2, 8),
                comm.handle(1).register_window(2, 16),
                comm.handle(2).register_window(2, 8),
            ]
        )


@pytest.mark.asyncio
async def test_duplicate_window_name_is_rejected(comm):
    await register_all(comm)
    with pytest.raises(SetupError, match="registered twice"):
        await comm.handle(0).register_window(1, 8, "data")


@pytest.mark.asyncio
async def test_registration_after_first_put_is_rejected(comm):
    await register_all(comm)
    comm.handle(0).put(PutDescriptor(1, slot=0, offset_bytes=0, payload=b"x", tag=0))
    with pytest.raises(SetupError, match="after communication started"):
        await comm.handle(0).register_window(1, 8, "late")


@pytest.mark.asyncio
@pytest.mark.parametrize(
    "desc",
    [
        PutDescriptor(1, slot=2, offset_bytes=0, payload=b"x", tag=0),
        PutDescriptor(1, slot=0, offset_bytes=4, payload=b"12345", tag=0),
        PutDescriptor(5, slot=0, offset_bytes=0, payload=b"x", tag=0),
        PutDescriptor(1, slot=0, offset_bytes=0, payload=b"", tag=0),
    ],
)
async def test_invalid_puts_are_protocol_errors(comm, desc):
    await register_all(comm)
    with pytest.raises(ProtocolError):
        comm.handle(0).put(desc)


@pytest.mark.asyncio
async def test_fence_checks_byte_conservation(comm):
    await register_all(comm)
    for h in comm.handles:
        h.put(PutDescriptor((h.rank + 1) % 3, slot=0, offset_bytes=0, payload=b"1234", tag=0))
    await asyncio.gather(*(h.fence() for h in comm.handles))

    comm.handle(2).bytes_applied_from[1] += 1
    with pytest.raises(CommError, match="byte conservation"):
        await run_ranks([h.fence() for h in comm.handles])


@pytest.mark.asyncio
async def test_random_delivery_keeps_per_pair_order():
    comm = await create_comm(3, seed=7, jitter=5, timeout_s=2.0)
    try:
        await register_all(comm, slot_count=4, per_peer_bytes=4)
        for j in range(40):
            for h in comm.handles:
                for dest in h.peers:
                    h.put(PutDescriptor(dest, j % 4, 0, j.to_bytes(4, "little"), tag=j % 4, iteration=j))
        await comm.fabric.quiesce()

        for h in comm.handles:
            assert h.failed is None
            window = h.window("data")
            assert [int(s) for s in window.last_stamp if s >= 0] == [39, 39]
            assert sum(window.counter.counts.values()) == 80
    finally:
        await comm.close()


@pytest.mark.asyncio
async def test_failed_rank_rejects_further_puts(comm):
    await register_all(comm)
    h = comm.handle(0)
    h._fail(CommError("peer lost"))

    with pytest.raises(CommError):
        h.put(PutDescriptor(1, slot=0, offset_bytes=0, payload=b"x", tag=0))


@pytest.mark.asyncio
async def test_create_comm_rejects_empty_communicator():
    with pytest.raises(SetupError):
        await create_comm(0)


@pytest.mark.asyncio
async def test_fence_returns_only_after_the_slowest_rank_enters(comm):
    await register_all(comm)

    async def enter(handle):
        if handle.rank == 2:
            await asyncio.sleep(0.06)
        start = time.monotonic()
        await handle.fence()
        return time.monotonic() - start

    waited = await comm.run(enter)

    assert waited[0] >= 0.05
    assert waited[1] >= 0.05


@pytest.mark.asyncio
async def test_fence_timeout_fails_the_rank_and_breaks_the_barrier(comm):
    # Arrange
    await register_all(comm)
    rank0, rank1 = comm.handle(0), comm.handle(1)

    # Act
    with pytest.raises(SetupError, match="timed out"):
        await rank0.fence(deadline=0.1)

    # Assert
    assert isinstance(rank0.failed, SetupError)
    with pytest.raises(CommError):
        await rank0.fence()
    with pytest.raises(CommError, match="barrier broken"):
        await rank1.fence(deadline=1.0)
    assert rank1.failed is not None
    with pytest.raises(CommError):
        rank1.put(PutDescriptor(0, slot=0, offset_bytes=0, payload=b"x", tag=0))


@pytest.mark.asyncio
async def test_puts_at_different_offsets_of_one_segment_both_land():
    comm = await create_comm(3, seed=11, jitter=4, timeout_s=2.0)
    try:
        await register_all(comm, slot_count=1, per_peer_bytes=8)
        sender = comm.handle(0)

        for dest in sender.peers:
            sender.put(PutDescriptor(dest, slot=0, offset_bytes=4, payload=b"tail", tag=0))
            sender.put(PutDescriptor(dest, slot=0, offset_bytes=0, payload=b"head", tag=0))

        for dest in sender.peers:
            handle = comm.handle(dest)
            await handle.await_count(0, 2, deadline=1.0)
            window = handle.window("data")
            assert window.segment(0, 0, 0, 4) == b"head"
            assert window.segment(0, 0, 4, 8) == b"tail"
    finally:
        await comm.close()
