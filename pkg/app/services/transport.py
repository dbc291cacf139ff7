import asyncio
import collections
import dataclasses
import enum
import logging
import typing

import numpy as np

from app.services.errors import (
    BlsError,
    CommError,
    CommTimeoutError,
    ProtocolError,
    SetupError,
)
from app.services.utils import digest

# One byte of the wire slot field addresses the slot, the other the window.
MAX_SLOTS = 255
MAX_WINDOWS = 255


class Backend(enum.Enum):
    IN_PROCESS = "in_process"
    TCP = "tcp"


@dataclasses.dataclass(frozen=True)
class PutDescriptor:
    dest: int
    slot: int
    offset_bytes: int
    payload: bytes
    tag: int
    iteration: int = 0
    window: int = 0

    @property
    def length_bytes(self) -> int:
        return len(self.payload)


class Signal:
    """Level-triggered wake-up for coroutines polling a predicate on local state."""

    def __init__(self) -> None:
        self._event = asyncio.Event()

    def notify(self) -> None:
        self._event.set()

    async def wait_until(self, predicate: typing.Callable[[], bool]) -> None:
        while not predicate():
            self._event.clear()
            await self._event.wait()


class TagCounter:
    def __init__(self) -> None:
        self.counts: typing.Dict[int, int] = collections.defaultdict(int)
        self.changed = Signal()

    def __getitem__(self, tag: int) -> int:
        return self.counts.get(tag, 0)

    def increment(self, tag: int) -> None:
        self.counts[tag] += 1
        self.changed.notify()

    def consume(self, tag: int, n: int) -> None:
        if self.counts.get(tag, 0) < n:
            raise ProtocolError(f"cannot consume {n} messages from tag {tag}")
        self.counts[tag] -= n


class RegisteredWindow:
    """
    Circular set of receive slots. Each slot holds one segment per source
    rank, and every segment remembers the iteration stamp of its last write.
    """

    def __init__(
        self, index: int, name: str, comm_size: int, slot_count: int, per_peer_bytes: int
    ) -> None:
        self.index = index
        self.name = name
        self.comm_size = comm_size
        self.slot_count = slot_count
        self.per_peer_bytes = per_peer_bytes
        self.buffer = np.zeros((slot_count, comm_size, per_peer_bytes), dtype=np.uint8)
        self.stamps = np.full((slot_count, comm_size), -1, dtype=np.int64)
        self.last_stamp = np.full(comm_size, -1, dtype=np.int64)
        self.counter = TagCounter()

    def validate(self, desc: PutDescriptor) -> None:
        if not 0 <= desc.dest < self.comm_size:
            raise ProtocolError(f"destination rank {desc.dest} out of range")
        if not 0 <= desc.slot < self.slot_count:
            raise ProtocolError(
                f"slot {desc.slot} out of range for window {self.name!r} "
                f"with {self.slot_count} slots"
            )
        if desc.length_bytes <= 0:
            raise ProtocolError("put payload must not be empty")
        if desc.offset_bytes < 0 or desc.offset_bytes + desc.length_bytes > self.per_peer_bytes:
            raise ProtocolError(
                f"put of {desc.length_bytes} B at offset {desc.offset_bytes} exceeds "
                f"segment capacity {self.per_peer_bytes} B of window {self.name!r}"
            )

    def write(self, source: int, desc: PutDescriptor) -> None:
        start = desc.offset_bytes
        end = start + desc.length_bytes
        self.buffer[desc.slot, source, start:end] = np.frombuffer(desc.payload, dtype=np.uint8)
        self.stamps[desc.slot, source] = desc.iteration

    def segment(self, slot: int, source: int, start: int = 0, end: int = None) -> bytes:
        return self.buffer[slot, source, start:end].tobytes()

    def stamp(self, slot: int, source: int) -> int:
        return int(self.stamps[slot, source])


class BaseTransport:
    backend: Backend = None

    def __init__(self, rank: int, comm_size: int, timeout_s: float) -> None:
        if comm_size < 1:
            raise SetupError(f"comm_size must be >= 1, got {comm_size}")
        self.rank = rank
        self.comm_size = comm_size
        self.timeout_s = timeout_s
        self.windows: typing.List[RegisteredWindow] = []
        self.failed: typing.Optional[BaseException] = None
        self.bytes_sent_to = [0] * comm_size
        self.bytes_applied_from = [0] * comm_size
        self.fence_epoch = 0
        # Collective contexts attached to this handle, by name.
        self.collectives: typing.Dict[str, typing.Any] = {}
        self._started = False
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def peers(self) -> typing.List[int]:
        return [r for r in range(self.comm_size) if r != self.rank]

    def window(self, name: str) -> RegisteredWindow:
        for window in self.windows:
            if window.name == name:
                return window
        raise KeyError(f"no window named {name!r}")

    async def register_window(
        self, slot_count: int, per_peer_bytes: int, name: str = "data"
    ) -> RegisteredWindow:
        self._check_failed()
        if not 1 <= slot_count <= MAX_SLOTS:
            raise SetupError(f"slot_count must be in [1, {MAX_SLOTS}], got {slot_count}")
        if per_peer_bytes < 1:
            raise SetupError(f"per_peer_bytes must be positive, got {per_peer_bytes}")
        if any(w.name == name for w in self.windows):
            raise SetupError(f"window {name!r} registered twice")
        if self._started:
            raise SetupError("register_window called after communication started")
        if len(self.windows) >= MAX_WINDOWS:
            raise SetupError("too many registered windows")

        window = RegisteredWindow(len(self.windows), name, self.comm_size, slot_count, per_peer_bytes)
        self.windows.append(window)
        token = digest(window.index, name, slot_count, per_peer_bytes)
        await self._exchange_registration(window.index, token)
        self.logger.debug(
            f"rank {self.rank}: registered window {name!r} "
            f"({slot_count} slots x {self.comm_size} x {per_peer_bytes} B)"
        )
        return window

    def put(self, desc: PutDescriptor) -> None:
        self._check_failed()
        if not 0 <= desc.window < len(self.windows):
            raise ProtocolError(f"window index {desc.window} is not registered")
        self.windows[desc.window].validate(desc)
        self._started = True
        self.bytes_sent_to[desc.dest] += desc.length_bytes
        if desc.dest == self.rank:
            # Local copy; self-transfers are never counted.
            self.windows[desc.window].write(self.rank, desc)
            self.bytes_applied_from[self.rank] += desc.length_bytes
            return
        self._send(desc)

    async def await_count(
        self, tag: int, n: int, deadline: typing.Optional[float] = None, window: int = 0
    ) -> None:
        if n < 0:
            raise ProtocolError(f"await_count threshold must be >= 0, got {n}")
        self._check_failed()
        win = self.windows[window]
        if n > 0:
            await self._flush_sends()
            try:
                await asyncio.wait_for(
                    win.counter.changed.wait_until(
                        lambda: win.counter[tag] >= n or self.failed is not None
                    ),
                    deadline,
                )
            except asyncio.TimeoutError:
                raise CommTimeoutError(tag, win.counter[tag], n, win.name) from None
            self._check_failed()
        win.counter.consume(tag, n)

    async def fence(self, deadline: typing.Optional[float] = None) -> None:
        self._check_failed()
        epoch = self.fence_epoch
        self.fence_epoch += 1
        await self._fence(epoch, deadline if deadline is not None else self.timeout_s)
        self._check_failed()

    async def close(self) -> None:
        pass

    def _apply(self, source: int, desc: PutDescriptor) -> None:
        """Write a delivered put, then count it; payload bytes land before the count."""
        if not 0 <= desc.window < len(self.windows):
            self._fail(ProtocolError(f"put from rank {source} targets unregistered window {desc.window}"))
            return
        win = self.windows[desc.window]
        try:
            win.validate(dataclasses.replace(desc, dest=self.rank))
        except ProtocolError as e:
            self._fail(e)
            return
        if desc.iteration < win.last_stamp[source]:
            self._fail(
                ProtocolError(
                    f"per-pair order violated on window {win.name!r}: rank {source} "
                    f"sent iteration {desc.iteration} after {win.last_stamp[source]}"
                )
            )
            return
        win.last_stamp[source] = desc.iteration
        win.write(source, desc)
        self.bytes_applied_from[source] += desc.length_bytes
        win.counter.increment(desc.tag)

    def _fail(self, exc: BaseException) -> None:
        if self.failed is None:
            self.failed = exc
            self.logger.error(f"rank {self.rank}: communicator failed: {exc}")
        for window in self.windows:
            window.counter.changed.notify()

    def _check_failed(self) -> None:
        if self.failed is not None:
            if isinstance(self.failed, SetupError):
                raise self.failed
            raise CommError(f"rank {self.rank}: communicator failed: {self.failed}") from self.failed

    async def _flush_sends(self) -> None:
        pass

    def _send(self, desc: PutDescriptor) -> None:
        raise NotImplementedError

    async def _exchange_registration(self, index: int, token: bytes) -> None:
        raise NotImplementedError

    async def _fence(self, epoch: int, deadline: float) -> None:
        raise NotImplementedError


class _Barrier:
    """
    Reusable rendezvous for coroutines of one event loop. A rank that times
    out breaks the barrier: every later or still waiting rank raises.
    """

    def __init__(self, parties: int) -> None:
        self.parties = parties
        self.broken: typing.Optional[BlsError] = None
        self._arrived = 0
        self._generation = 0
        self._errors: typing.Dict[int, BlsError] = {}
        self._released = Signal()

    def _broken_error(self, what: str) -> CommError:
        return CommError(f"{what}: barrier broken ({self.broken})")

    async def wait(
        self,
        timeout_s: float,
        on_complete: typing.Optional[typing.Callable[[], None]] = None,
        what: str = "barrier",
    ) -> None:
        if self.broken is not None:
            raise self._broken_error(what)
        generation = self._generation
        self._arrived += 1
        if self._arrived == self.parties:
            self._arrived = 0
            self._generation += 1
            if on_complete is not None:
                try:
                    on_complete()
                except BlsError as e:
                    self._errors[generation] = e
            self._released.notify()
        else:
            try:
                await asyncio.wait_for(
                    self._released.wait_until(
                        lambda: self._generation > generation or self.broken is not None
                    ),
                    timeout_s,
                )
            except asyncio.TimeoutError:
                self._arrived -= 1
                self.broken = SetupError(
                    f"{what} timed out after {timeout_s:.1f}s with "
                    f"{self._arrived + 1} of {self.parties} ranks arrived"
                )
                self._released.notify()
                raise self.broken from None
            except asyncio.CancelledError:
                if self._generation == generation:
                    self._arrived -= 1
                raise
            if self._generation == generation:
                self._arrived -= 1
                raise self._broken_error(what)
        if generation in self._errors:
            raise self._errors[generation]


class _Inbox:
    def __init__(self, rng: typing.Optional[np.random.Generator] = None) -> None:
        self.queues: typing.Dict[int, collections.deque] = collections.defaultdict(collections.deque)
        self.arrivals: collections.deque = collections.deque()
        self.pending = 0
        self.signal = Signal()
        self.rng = rng

    def push(self, source: int, desc: PutDescriptor) -> None:
        self.queues[source].append(desc)
        if self.rng is None:
            self.arrivals.append(source)
        self.pending += 1
        self.signal.notify()

    def pick(self) -> int:
        if self.rng is None:
            return self.arrivals.popleft()
        sources = sorted(s for s, q in self.queues.items() if q)
        return sources[int(self.rng.integers(len(sources)))]

    def pop(self, source: int) -> PutDescriptor:
        self.pending -= 1
        return self.queues[source].popleft()


class InProcessFabric:
    """
    Shared delivery channels of an in-process communicator. Every destination
    rank has one delivery worker. With a seed, the worker picks the next
    source at random and yields up to ``jitter`` times before applying, which
    reorders deliveries across (source, dest) pairs but never within one.
    """

    def __init__(
        self,
        comm_size: int,
        timeout_s: float,
        seed: typing.Optional[int] = None,
        jitter: int = 0,
    ) -> None:
        self.comm_size = comm_size
        self.timeout_s = timeout_s
        self.rng = np.random.default_rng(seed) if seed is not None else None
        self.jitter = jitter
        self.transports = [
            InProcessTransport(self, rank, comm_size, timeout_s) for rank in range(comm_size)
        ]
        self.barrier = _Barrier(comm_size)
        self.registrations: typing.Dict[int, typing.Dict[int, bytes]] = collections.defaultdict(dict)
        self._inboxes = [_Inbox(self.rng) for _ in range(comm_size)]
        self._in_flight = [0] * comm_size
        self._delivered = Signal()
        self._workers: typing.List[asyncio.Task] = []
        self.logger = logging.getLogger(self.__class__.__name__)

    def start(self) -> None:
        self._workers = [
            asyncio.create_task(self._deliver(dest)) for dest in range(self.comm_size)
        ]

    async def close(self) -> None:
        for worker in self._workers:
            worker.cancel()
        await asyncio.gather(*self._workers, return_exceptions=True)
        self._workers = []

    def submit(self, source: int, desc: PutDescriptor) -> None:
        self._in_flight[source] += 1
        self._inboxes[desc.dest].push(source, desc)

    async def flush(self, source: int, deadline: typing.Optional[float] = None) -> None:
        await asyncio.wait_for(
            self._delivered.wait_until(lambda: self._in_flight[source] == 0), deadline
        )

    async def quiesce(self) -> None:
        await self._delivered.wait_until(lambda: sum(self._in_flight) == 0)

    async def _deliver(self, dest: int) -> None:
        inbox = self._inboxes[dest]
        transport = self.transports[dest]
        while True:
            await inbox.signal.wait_until(lambda: inbox.pending > 0)
            source = inbox.pick()
            if self.rng is not None and self.jitter:
                for _ in range(int(self.rng.integers(0, self.jitter + 1))):
                    await asyncio.sleep(0)
            desc = inbox.pop(source)
            try:
                transport._apply(source, desc)
            except Exception as e:  # keep the worker alive; fail-stop the rank
                transport._fail(CommError(f"delivery to rank {dest} failed: {e}"))
            self._in_flight[source] -= 1
            self._delivered.notify()

    def check_conservation(self) -> None:
        for source in self.transports:
            for dest in self.transports:
                sent = source.bytes_sent_to[dest.rank]
                applied = dest.bytes_applied_from[source.rank]
                if sent != applied:
                    raise CommError(
                        f"byte conservation violated: rank {source.rank} put {sent} B "
                        f"to rank {dest.rank}, which applied {applied} B"
                    )


class InProcessTransport(BaseTransport):
    backend = Backend.IN_PROCESS

    def __init__(self, fabric: InProcessFabric, rank: int, comm_size: int, timeout_s: float) -> None:
        super().__init__(rank, comm_size, timeout_s)
        self.fabric = fabric

    def _send(self, desc: PutDescriptor) -> None:
        self.fabric.submit(self.rank, desc)

    async def _exchange_registration(self, index: int, token: bytes) -> None:
        tokens = self.fabric.registrations[index]
        tokens[self.rank] = token

        def compare() -> None:
            if len(set(tokens.values())) != 1:
                raise SetupError(
                    f"mismatched arguments for window registration #{index} across ranks"
                )

        try:
            await self.fabric.barrier.wait(self.timeout_s, compare, what="register_window")
        except CommError as e:
            self._fail(e)
            raise

    async def _fence(self, epoch: int, deadline: float) -> None:
        try:
            await self.fabric.flush(self.rank, deadline)
        except asyncio.TimeoutError:
            self._fail(CommError(f"rank {self.rank}: fence {epoch} could not flush its puts"))
            self._check_failed()
        try:
            await self.fabric.barrier.wait(deadline, self.fabric.check_conservation, what=f"fence {epoch}")
        except CommError as e:
            self._fail(e)
            raise
