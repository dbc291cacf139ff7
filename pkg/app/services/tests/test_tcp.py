import asyncio
import socket

import pytest

from app.services.collective import SafetyMode
from app.services.comm import create_comm
from app.services.errors import CommError, SetupError
from app.services.tcp import (
    CONTROL_SLOT,
    HEADER,
    Control,
    control_frame,
    decode_header,
    encode_frame,
    parse_endpoint,
    read_endpoints,
)
from app.services.transport import Backend, PutDescriptor
from app.services.verify import expected_segments, exchange_rounds


def free_endpoints(n):
    socks = []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return [f"127.0.0.1:{p}" for p in ports]


@pytest.fixture
async def tcp_comm():
    comm = await create_comm(4, Backend.TCP, endpoints=free_endpoints(4), timeout_s=5.0)
    yield comm
    await comm.close()


def test_frame_header_layout():
    frame = encode_frame(tag=3, slot=258, source=2, iteration=41, offset=4, payload=b"abc")

    assert len(frame) == HEADER.size + 3 == 30
    assert decode_header(frame[: HEADER.size]) == (3, 258, 2, 41, 4, 3)


def test_decode_rejects_bad_magic_and_version():
    frame = bytearray(encode_frame(0, 0, 0, 0, 0, b""))
    frame[0] ^= 0xFF
    with pytest.raises(CommError, match="magic"):
        decode_header(bytes(frame))

    frame = bytearray(encode_frame(0, 0, 0, 0, 0, b""))
    frame[4] = 9
    with pytest.raises(CommError, match="version"):
        decode_header(bytes(frame))


def test_control_frames_use_the_reserved_slot():
    tag, slot, source, iteration, _, length = decode_header(
        control_frame(Control.FENCE, 1, 7, b"\x00" * 8)[: HEADER.size]
    )
    assert (tag, slot, source, iteration, length) == (Control.FENCE, CONTROL_SLOT, 1, 7, 8)


def test_endpoint_parsing(tmp_path):
    assert parse_endpoint("10.0.0.1:9000") == ("10.0.0.1", 9000)
    with pytest.raises(SetupError):
        parse_endpoint("no-port")

    path = tmp_path / "endpoints"
    path.write_text("# ranks\n127.0.0.1:9000\n\n127.0.0.1:9001\n")
    assert read_endpoints(path) == ["127.0.0.1:9000", "127.0.0.1:9001"]


@pytest.mark.asyncio
async def test_loopback_puts_and_fence(tcp_comm):
    # Arrange
    await asyncio.gather(*(h.register_window(2, 16) for h in tcp_comm.handles))

    # Act
    for h in tcp_comm.handles:
        for dest in range(4):
            h.put(PutDescriptor(dest, slot=1, offset_bytes=0, payload=f"{h.rank}->{dest}".encode(), tag=1, iteration=5))
    await asyncio.gather(*(h.await_count(1, 3, deadline=5.0) for h in tcp_comm.handles))
    await asyncio.gather(*(h.fence() for h in tcp_comm.handles))

    # Assert
    for h in tcp_comm.handles:
        window = h.window("data")
        for source in range(4):
            assert window.segment(1, source, 0, 4) == f"{source}->{h.rank}".encode()
            assert window.stamp(1, source) == 5


@pytest.mark.asyncio
async def test_bounded_lag_exchange_over_sockets(tcp_comm):
    outcome = await tcp_comm.run(exchange_rounds, 20, 3, 300, 2, SafetyMode.ACKED)

    for rank, (results, trace) in enumerate(outcome):
        assert [r.iteration for r in results] == list(range(20))
        for j, result in enumerate(results):
            assert result.segments == expected_segments(3, j, rank, 4, 300)


@pytest.mark.asyncio
async def test_setup_times_out_when_peers_never_listen(mocker):
    mocker.patch("app.services.tcp.asyncio.open_connection", side_effect=ConnectionRefusedError)

    with pytest.raises(SetupError):
        await create_comm(2, Backend.TCP, endpoints=free_endpoints(2), rank=0, timeout_s=0.3)


@pytest.mark.asyncio
async def test_endpoint_count_must_match_comm_size():
    with pytest.raises(SetupError):
        await create_comm(3, Backend.TCP, endpoints=free_endpoints(2))


@pytest.mark.asyncio
async def test_duplicate_rank_id_fails_the_receiver(tcp_comm):
    host, port = tcp_comm.handle(0).endpoints[0]
    _, writer = await asyncio.open_connection(host, port)
    writer.write(control_frame(Control.HELLO, 1))
    await writer.drain()

    for _ in range(100):
        if tcp_comm.handle(0).failed is not None:
            break
        await asyncio.sleep(0.01)

    assert isinstance(tcp_comm.handle(0).failed, SetupError)
    writer.close()
