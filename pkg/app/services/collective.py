import collections
import dataclasses
import enum
import logging
import struct
import time
import typing

from pydantic.v1 import BaseModel, root_validator, validator

from app.services.errors import HazardError, ProtocolError
from app.services.transport import MAX_SLOTS, BaseTransport, PutDescriptor, RegisteredWindow
from app.services.utils import checksum

# Every segment starts with its actual payload length.
LENGTH_PREFIX = struct.Struct("<I")
ACK = struct.Struct("<q")


class SafetyMode(enum.Enum):
    FAITHFUL = "faithful"
    ACKED = "acked"


class RequestState(enum.Enum):
    INITIATED = "initiated"
    COMPLETED = "completed"


class BlsConfig(BaseModel):
    bound_k: int = 0
    per_peer_bytes: int
    safety_mode: SafetyMode = SafetyMode.FAITHFUL
    slot_count: typing.Optional[int] = None
    wait_timeout_s: typing.Optional[float] = None

    class Config:
        frozen = True

    @validator("bound_k")
    def _bound_non_negative(cls, v):
        if v < 0:
            raise ValueError("bound_k must be >= 0")
        return v

    @validator("per_peer_bytes")
    def _positive_capacity(cls, v):
        if v <= 0:
            raise ValueError("per_peer_bytes must be positive")
        return v

    @root_validator(skip_on_failure=True)
    def _default_slot_count(cls, values):
        if values.get("slot_count") is None:
            k = values["bound_k"]
            # A peer consumes iteration i only after initiating i + k.
            values["slot_count"] = 2 * k + 1 if values["safety_mode"] is SafetyMode.ACKED else max(k, 1)
        if not 1 <= values["slot_count"] <= MAX_SLOTS:
            raise ValueError(f"slot_count must be in [1, {MAX_SLOTS}]")
        return values


@dataclasses.dataclass
class RecvResult:
    iteration: int
    segments: typing.List[bytes]

    @property
    def lengths(self) -> typing.List[int]:
        return [len(s) for s in self.segments]

    def checksums(self) -> typing.List[str]:
        return [checksum(s) for s in self.segments]


@dataclasses.dataclass
class A2ARequest:
    iteration: int
    tag: int
    send_lengths: typing.List[int]
    recv_lengths: typing.Optional[typing.List[int]] = None
    state: RequestState = RequestState.INITIATED
    result: typing.Optional[RecvResult] = None

    @property
    def slot(self) -> int:
        return self.tag


def _frame_segment(segment: bytes) -> bytes:
    return LENGTH_PREFIX.pack(len(segment)) + bytes(segment)


def _copy_out(
    window: RegisteredWindow,
    rank: int,
    slot: int,
    iteration: int,
    recv_lengths: typing.Optional[typing.Sequence[int]],
) -> RecvResult:
    for source in range(window.comm_size):
        stamp = window.stamp(slot, source)
        if stamp != iteration:
            raise HazardError(rank, source, iteration, stamp)
    segments = []
    capacity = window.per_peer_bytes - LENGTH_PREFIX.size
    for source in range(window.comm_size):
        (length,) = LENGTH_PREFIX.unpack(window.segment(slot, source, 0, LENGTH_PREFIX.size))
        if length > capacity:
            raise ProtocolError(f"segment from rank {source} declares {length} B > capacity {capacity} B")
        if recv_lengths is not None and recv_lengths[source] != length:
            raise ProtocolError(
                f"iteration {iteration}: rank {source} sent {length} B, "
                f"expected {recv_lengths[source]} B"
            )
        segments.append(window.segment(slot, source, LENGTH_PREFIX.size, LENGTH_PREFIX.size + length))
    return RecvResult(iteration, segments)


class BlsContext:
    """
    Bounded lag synchronous alltoallv on one rank.

    Iteration ``j`` puts into slot ``j mod slot_count`` of every peer with the
    same tag and completes once ``comm_size - 1`` messages of that tag have
    arrived. Requests form a FIFO and complete strictly in iteration order.
    In acked mode a receiver acknowledges each consumed iteration to every
    peer, and a sender reuses a slot only once all peers have acknowledged
    the iteration that last occupied it.
    """

    def __init__(
        self,
        comm: BaseTransport,
        config: BlsConfig,
        window: RegisteredWindow,
        ack_window: typing.Optional[RegisteredWindow] = None,
    ) -> None:
        self.comm = comm
        self.config = config
        self.window = window
        self.ack_window = ack_window
        self.iteration = 0
        self.completed = 0
        self.requests: typing.Deque[A2ARequest] = collections.deque()
        self.trace: typing.List[typing.Tuple[int, int]] = []
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def slot_count(self) -> int:
        return self.config.slot_count

    @property
    def outstanding(self) -> int:
        return len(self.requests)

    async def initiate(
        self,
        send_segments: typing.Sequence[bytes],
        recv_lengths: typing.Optional[typing.Sequence[int]] = None,
    ) -> A2ARequest:
        comm = self.comm
        if len(send_segments) != comm.comm_size:
            raise ProtocolError(f"expected {comm.comm_size} send segments, got {len(send_segments)}")
        for dest, segment in enumerate(send_segments):
            if len(segment) > self.config.per_peer_bytes:
                raise ProtocolError(
                    f"segment overflow: {len(segment)} B for rank {dest} exceeds "
                    f"per_peer_bytes={self.config.per_peer_bytes}"
                )
        if recv_lengths is not None and len(recv_lengths) != comm.comm_size:
            raise ProtocolError(f"expected {comm.comm_size} receive lengths, got {len(recv_lengths)}")
        if self.outstanding > self.config.bound_k:
            raise ProtocolError(
                f"too many outstanding requests: {self.outstanding} > bound {self.config.bound_k}"
            )

        j = self.iteration
        slot = j % self.slot_count
        # The local slot may still hold an older request; complete it in place.
        for request in list(self.requests):
            if request.state is RequestState.INITIATED and request.iteration <= j - self.slot_count:
                await self._complete(request)
        if self.ack_window is not None and j >= self.slot_count:
            await self._await_acks(j)

        self.trace.append((j, time.monotonic_ns()))
        for dest, segment in enumerate(send_segments):
            comm.put(
                PutDescriptor(
                    dest=dest,
                    slot=slot,
                    offset_bytes=0,
                    payload=_frame_segment(segment),
                    tag=slot,
                    iteration=j,
                    window=self.window.index,
                )
            )
        request = A2ARequest(
            iteration=j,
            tag=slot,
            send_lengths=[len(s) for s in send_segments],
            recv_lengths=None if recv_lengths is None else list(recv_lengths),
        )
        self.requests.append(request)
        self.iteration += 1
        self.logger.debug(f"rank {comm.rank}: initiated iteration {j} (slot {slot})")
        return request

    async def wait(self) -> RecvResult:
        if not self.requests:
            raise ProtocolError("alltoallv_wait called with no outstanding request")
        request = self.requests[0]
        if request.state is RequestState.INITIATED:
            await self._complete(request)
        self.requests.popleft()
        self.completed += 1
        return request.result

    async def drain(self) -> typing.List[RecvResult]:
        results = []
        while self.requests:
            results.append(await self.wait())
        return results

    async def _complete(self, request: A2ARequest) -> None:
        comm = self.comm
        await comm.await_count(
            request.tag,
            comm.comm_size - 1,
            deadline=self.config.wait_timeout_s,
            window=self.window.index,
        )
        request.result = _copy_out(
            self.window, comm.rank, request.slot, request.iteration, request.recv_lengths
        )
        request.state = RequestState.COMPLETED
        if self.ack_window is not None:
            self._send_acks(request.iteration)
        self.logger.debug(f"rank {comm.rank}: completed iteration {request.iteration}")

    def _send_acks(self, iteration: int) -> None:
        for peer in self.comm.peers:
            self.comm.put(
                PutDescriptor(
                    dest=peer,
                    slot=0,
                    offset_bytes=0,
                    payload=ACK.pack(iteration),
                    tag=iteration % self.slot_count,
                    iteration=iteration,
                    window=self.ack_window.index,
                )
            )

    async def _await_acks(self, iteration: int) -> None:
        comm = self.comm
        needed = iteration - self.slot_count
        await comm.await_count(
            iteration % self.slot_count,
            comm.comm_size - 1,
            deadline=self.config.wait_timeout_s,
            window=self.ack_window.index,
        )
        for peer in comm.peers:
            (acked,) = ACK.unpack(self.ack_window.segment(0, peer))
            if acked < needed:
                raise ProtocolError(
                    f"rank {comm.rank}: ack from rank {peer} covers iteration {acked}, "
                    f"slot reuse needs {needed}"
                )


async def bls_init(comm: BaseTransport, config: BlsConfig) -> BlsContext:
    if "bls" in comm.collectives:
        raise ProtocolError(f"rank {comm.rank} already has a BLS context")
    window = await comm.register_window(
        config.slot_count, config.per_peer_bytes + LENGTH_PREFIX.size, name="bls"
    )
    ack_window = None
    if config.safety_mode is SafetyMode.ACKED:
        ack_window = await comm.register_window(1, ACK.size, name="bls-ack")
    ctx = BlsContext(comm, config, window, ack_window)
    comm.collectives["bls"] = ctx
    return ctx


class RefAlltoallv:
    """Blocking linear alltoallv: one single-slot round closed by a fence."""

    def __init__(
        self,
        comm: BaseTransport,
        window: RegisteredWindow,
        per_peer_bytes: int,
        wait_timeout_s: typing.Optional[float] = None,
    ) -> None:
        self.comm = comm
        self.window = window
        self.per_peer_bytes = per_peer_bytes
        self.wait_timeout_s = wait_timeout_s
        self.rounds = 0

    @classmethod
    async def init(
        cls, comm: BaseTransport, per_peer_bytes: int, wait_timeout_s: typing.Optional[float] = None
    ) -> "RefAlltoallv":
        if "ref" in comm.collectives:
            raise ProtocolError(f"rank {comm.rank} already has a reference alltoallv context")
        window = await comm.register_window(1, per_peer_bytes + LENGTH_PREFIX.size, name="ref")
        ref = cls(comm, window, per_peer_bytes, wait_timeout_s)
        comm.collectives["ref"] = ref
        return ref

    async def __call__(
        self,
        send_segments: typing.Sequence[bytes],
        recv_lengths: typing.Optional[typing.Sequence[int]] = None,
    ) -> RecvResult:
        comm = self.comm
        if len(send_segments) != comm.comm_size:
            raise ProtocolError(f"expected {comm.comm_size} send segments, got {len(send_segments)}")
        for dest, segment in enumerate(send_segments):
            if len(segment) > self.per_peer_bytes:
                raise ProtocolError(
                    f"segment overflow: {len(segment)} B for rank {dest} exceeds "
                    f"per_peer_bytes={self.per_peer_bytes}"
                )
        j = self.rounds
        for dest, segment in enumerate(send_segments):
            comm.put(PutDescriptor(dest, 0, 0, _frame_segment(segment), tag=0, iteration=j, window=self.window.index))
        await comm.await_count(0, comm.comm_size - 1, deadline=self.wait_timeout_s, window=self.window.index)
        result = _copy_out(self.window, comm.rank, 0, j, recv_lengths)
        # Nobody may overwrite the slot before every rank has copied it out.
        await comm.fence()
        self.rounds += 1
        return result


async def ref_alltoallv(
    ref: RefAlltoallv,
    send_segments: typing.Sequence[bytes],
    recv_lengths: typing.Optional[typing.Sequence[int]] = None,
) -> RecvResult:
    """
    One blocking alltoallv on the communicator of ``ref``. The context from
    ``RefAlltoallv.init`` owns the single-slot window, registered collectively
    before any put, so it stands in for the bare communicator.
    """
    return await ref(send_segments, recv_lengths)


def compute_bls_overhead(k: int, s: int, b: int, tables: int) -> int:
    """
    Extra bytes per process for bound ``k``: per lagged iteration one
    alltoallv buffer (s * b * tables) plus the queued dense state (s^2 + b).
    """
    if k < 0 or s <= 0 or b <= 0 or tables <= 0:
        raise ValueError("k must be >= 0 and s, b, tables positive")
    return k * (s * b * tables + s * s + b)
