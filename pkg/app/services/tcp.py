import asyncio
import collections
import dataclasses
import enum
import struct
import typing

from app.services.errors import CommError, SetupError
from app.services.transport import Backend, BaseTransport, PutDescriptor, Signal
from app.services.utils import retry_with_backoff

MAGIC = 0x424C5321
VERSION = 1
# magic, version, tag, slot, source rank, iteration stamp, offset, length
HEADER = struct.Struct("!IBHHHQII")
CONTROL_SLOT = 0xFFFF
SLOTS_PER_WINDOW = 256


class Control(enum.IntEnum):
    HELLO = 1
    REGISTER = 2
    FENCE = 3
    GOODBYE = 4


@dataclasses.dataclass(frozen=True)
class Frame:
    tag: int
    slot: int
    source: int
    iteration: int
    offset: int
    payload: bytes

    @property
    def is_control(self) -> bool:
        return self.slot == CONTROL_SLOT


def encode_frame(
    tag: int, slot: int, source: int, iteration: int, offset: int, payload: bytes
) -> bytes:
    return HEADER.pack(MAGIC, VERSION, tag, slot, source, iteration, offset, len(payload)) + payload


def decode_header(data: bytes) -> typing.Tuple[int, int, int, int, int, int]:
    magic, version, tag, slot, source, iteration, offset, length = HEADER.unpack(data)
    if magic != MAGIC:
        raise CommError(f"bad frame magic 0x{magic:08x}")
    if version != VERSION:
        raise CommError(f"unsupported frame version {version}")
    return tag, slot, source, iteration, offset, length


async def read_frame(reader: asyncio.StreamReader) -> Frame:
    header = await reader.readexactly(HEADER.size)
    tag, slot, source, iteration, offset, length = decode_header(header)
    payload = await reader.readexactly(length) if length else b""
    return Frame(tag, slot, source, iteration, offset, payload)


def control_frame(kind: Control, source: int, iteration: int = 0, payload: bytes = b"") -> bytes:
    return encode_frame(int(kind), CONTROL_SLOT, source, iteration, 0, payload)


def parse_endpoint(endpoint: str) -> typing.Tuple[str, int]:
    host, sep, port = endpoint.strip().rpartition(":")
    if not sep or not host:
        raise SetupError(f"endpoint {endpoint!r} is not host:port")
    return host, int(port)


def read_endpoints(path) -> typing.List[str]:
    with open(path) as f:
        return [line.strip() for line in f if line.strip() and not line.startswith("#")]


class TcpTransport(BaseTransport):
    """
    One rank of a socket communicator. Every rank listens on its own endpoint
    and opens one outbound stream per peer; outbound streams carry puts and
    control frames, inbound streams are read by one task per peer. TCP keeps
    each (source, dest) stream in order, so a fence frame trails every put
    the source issued before it.
    """

    backend = Backend.TCP

    def __init__(self, rank: int, endpoints: typing.Sequence[str], timeout_s: float) -> None:
        super().__init__(rank, len(endpoints), timeout_s)
        self.endpoints = [parse_endpoint(e) for e in endpoints]
        self._server: typing.Optional[asyncio.AbstractServer] = None
        self._writers: typing.Dict[int, asyncio.StreamWriter] = {}
        self._readers: typing.Dict[int, asyncio.Task] = {}
        self._registrations: typing.Dict[int, typing.Dict[int, bytes]] = collections.defaultdict(dict)
        self._fences: typing.Dict[int, int] = collections.defaultdict(int)
        self._departed: typing.Set[int] = set()
        self._control = Signal()
        self._closing = False

    async def start(self) -> None:
        host, port = self.endpoints[self.rank]
        try:
            self._server = await asyncio.start_server(self._on_inbound, host, port)
            await asyncio.wait_for(self._connect_all(), self.timeout_s)
            await asyncio.wait_for(
                self._control.wait_until(
                    lambda: len(self._readers) == self.comm_size - 1 or self.failed is not None
                ),
                self.timeout_s,
            )
        except asyncio.TimeoutError:
            await self.close()
            raise SetupError(
                f"rank {self.rank}: setup timed out after {self.timeout_s:.1f}s "
                f"({len(self._writers)} outbound, {len(self._readers)} inbound peers)"
            ) from None
        except OSError as e:
            await self.close()
            raise SetupError(f"rank {self.rank}: connection failure: {e}") from e
        if self.failed is not None:
            await self.close()
        self._check_failed()
        self.logger.info(f"rank {self.rank}: connected to {self.comm_size - 1} peers")

    async def _connect_all(self) -> None:
        for peer in self.peers:
            host, port = self.endpoints[peer]
            _, writer = await retry_with_backoff(
                asyncio.open_connection, deadline_s=self.timeout_s, host=host, port=port
            )
            writer.write(control_frame(Control.HELLO, self.rank))
            self._writers[peer] = writer

    async def _on_inbound(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            hello = await asyncio.wait_for(read_frame(reader), self.timeout_s)
        except (asyncio.TimeoutError, asyncio.IncompleteReadError, CommError) as e:
            self.logger.error(f"rank {self.rank}: dropped inbound connection without hello: {e}")
            writer.close()
            return
        source = hello.source
        if not hello.is_control or hello.tag != Control.HELLO:
            self._fail(SetupError(f"rank {self.rank}: first frame from peer was not a hello"))
        elif not 0 <= source < self.comm_size or source == self.rank:
            self._fail(SetupError(f"rank {self.rank}: peer announced invalid rank id {source}"))
        elif source in self._readers:
            self._fail(SetupError(f"rank {self.rank}: duplicate rank id {source}"))
        else:
            self._readers[source] = asyncio.current_task()
            self._control.notify()
            await self._read_loop(source, reader)
            return
        self._control.notify()
        writer.close()

    async def _read_loop(self, source: int, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                frame = await read_frame(reader)
                if frame.is_control:
                    if self._handle_control(source, frame):
                        return
                    continue
                window, slot = divmod(frame.slot, SLOTS_PER_WINDOW)
                self._apply(
                    source,
                    PutDescriptor(
                        dest=self.rank,
                        slot=slot,
                        offset_bytes=frame.offset,
                        payload=frame.payload,
                        tag=frame.tag,
                        iteration=frame.iteration,
                        window=window,
                    ),
                )
        except asyncio.IncompleteReadError:
            if not self._closing and source not in self._departed:
                self._fail(CommError(f"rank {self.rank}: connection from rank {source} lost"))
        except CommError as e:
            self._fail(e)

    def _handle_control(self, source: int, frame: Frame) -> bool:
        kind = frame.tag
        if kind == Control.REGISTER:
            self._registrations[frame.iteration][source] = frame.payload
        elif kind == Control.FENCE:
            declared = int.from_bytes(frame.payload, "little")
            applied = self.bytes_applied_from[source]
            if declared != applied:
                self._fail(
                    CommError(
                        f"byte conservation violated: rank {source} put {declared} B "
                        f"to rank {self.rank}, which applied {applied} B"
                    )
                )
            self._fences[frame.iteration] += 1
        elif kind == Control.GOODBYE:
            self._departed.add(source)
            self._control.notify()
            return True
        else:
            self._fail(CommError(f"unknown control frame kind {kind} from rank {source}"))
        self._control.notify()
        return False

    def _fail(self, exc: BaseException) -> None:
        super()._fail(exc)
        self._control.notify()

    def _send(self, desc: PutDescriptor) -> None:
        writer = self._writers[desc.dest]
        if writer.is_closing():
            self._fail(CommError(f"rank {self.rank}: stream to rank {desc.dest} is closed"))
            self._check_failed()
        writer.write(
            encode_frame(
                desc.tag,
                desc.window * SLOTS_PER_WINDOW + desc.slot,
                self.rank,
                desc.iteration,
                desc.offset_bytes,
                desc.payload,
            )
        )

    async def _flush_sends(self) -> None:
        try:
            await asyncio.gather(*(w.drain() for w in self._writers.values()))
        except ConnectionError as e:
            self._fail(CommError(f"rank {self.rank}: send failed: {e}"))
            self._check_failed()

    def _broadcast(self, frames: typing.Callable[[int], bytes]) -> None:
        for peer, writer in self._writers.items():
            writer.write(frames(peer))

    async def _await_control(self, predicate: typing.Callable[[], bool], what: str, deadline: float) -> None:
        try:
            await asyncio.wait_for(
                self._control.wait_until(lambda: predicate() or self.failed is not None), deadline
            )
        except asyncio.TimeoutError:
            self._fail(SetupError(f"rank {self.rank}: {what} timed out after {deadline:.1f}s"))
        self._check_failed()

    async def _exchange_registration(self, index: int, token: bytes) -> None:
        self._broadcast(lambda peer: control_frame(Control.REGISTER, self.rank, index, token))
        await self._flush_sends()
        tokens = self._registrations[index]
        await self._await_control(
            lambda: len(tokens) == self.comm_size - 1, "register_window", self.timeout_s
        )
        mismatched = sorted(peer for peer, t in tokens.items() if t != token)
        if mismatched:
            raise SetupError(
                f"rank {self.rank}: mismatched arguments for window registration "
                f"#{index} at ranks {mismatched}"
            )

    async def _fence(self, epoch: int, deadline: float) -> None:
        self._broadcast(
            lambda peer: control_frame(
                Control.FENCE, self.rank, epoch, self.bytes_sent_to[peer].to_bytes(8, "little")
            )
        )
        await self._flush_sends()
        await self._await_control(
            lambda: self._fences[epoch] == self.comm_size - 1, f"fence {epoch}", deadline
        )

    async def close(self) -> None:
        if self._closing:
            return
        self._closing = True
        for writer in self._writers.values():
            if not writer.is_closing():
                writer.write(control_frame(Control.GOODBYE, self.rank))
        for writer in self._writers.values():
            try:
                await writer.drain()
            except ConnectionError:
                pass
            writer.close()
        for task in self._readers.values():
            if task is not asyncio.current_task():
                task.cancel()
        await asyncio.gather(*self._readers.values(), return_exceptions=True)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
