import asyncio
import logging
import typing

from app.services.errors import SetupError
from app.services.tcp import TcpTransport
from app.services.transport import Backend, BaseTransport, InProcessFabric
from app.settings import get_settings

logger = logging.getLogger(__name__)


class Communicator:
    """The rank handles of one communicator that live in this OS process."""

    def __init__(
        self,
        comm_size: int,
        backend: Backend,
        handles: typing.Sequence[BaseTransport],
        fabric: typing.Optional[InProcessFabric] = None,
    ) -> None:
        self.comm_size = comm_size
        self.backend = backend
        self.handles = list(handles)
        self.fabric = fabric

    def handle(self, rank: int) -> BaseTransport:
        for handle in self.handles:
            if handle.rank == rank:
                return handle
        raise KeyError(f"rank {rank} is not local to this process")

    async def run(self, fn: typing.Callable[..., typing.Awaitable], *args, **kwargs) -> typing.List:
        """Run ``fn(handle, *args)`` once per local rank, concurrently."""
        return await run_ranks([fn(h, *args, **kwargs) for h in self.handles])

    async def close(self) -> None:
        await asyncio.gather(*(h.close() for h in self.handles), return_exceptions=True)
        if self.fabric is not None:
            await self.fabric.close()


async def run_ranks(coros: typing.Sequence[typing.Awaitable]) -> typing.List:
    """
    Await one coroutine per rank. The first rank to raise cancels the rest,
    since its peers would otherwise block on it until their deadlines.
    """
    tasks = [asyncio.ensure_future(c) for c in coros]
    if not tasks:
        return []
    try:
        done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
    except asyncio.CancelledError:
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise
    failed = [t for t in tasks if t.done() and not t.cancelled() and t.exception() is not None]
    if failed:
        for task in pending:
            task.cancel()
        await asyncio.gather(*pending, return_exceptions=True)
        raise failed[0].exception()
    return [t.result() for t in tasks]


async def create_comm(
    comm_size: int,
    backend: Backend = Backend.IN_PROCESS,
    endpoints: typing.Optional[typing.Sequence[str]] = None,
    rank: typing.Optional[int] = None,
    seed: typing.Optional[int] = None,
    jitter: int = 0,
    timeout_s: typing.Optional[float] = None,
) -> Communicator:
    backend = Backend(backend)
    if comm_size < 1:
        raise SetupError(f"comm_size must be >= 1, got {comm_size}")
    if timeout_s is None:
        timeout_s = get_settings().comm_timeout_s

    if backend == Backend.IN_PROCESS:
        fabric = InProcessFabric(comm_size, timeout_s, seed=seed, jitter=jitter)
        fabric.start()
        logger.debug(f"in-process communicator of size {comm_size} (seed={seed}, jitter={jitter})")
        return Communicator(comm_size, backend, fabric.transports, fabric)

    if backend == Backend.TCP:
        if endpoints is None or len(endpoints) != comm_size:
            raise SetupError(
                f"tcp backend needs {comm_size} endpoints, got "
                f"{0 if endpoints is None else len(endpoints)}"
            )
        ranks = range(comm_size) if rank is None else [rank]
        handles = [TcpTransport(r, endpoints, timeout_s) for r in ranks]
        try:
            await run_ranks([h.start() for h in handles])
        except BaseException:
            await asyncio.gather(*(h.close() for h in handles), return_exceptions=True)
            raise
        return Communicator(comm_size, backend, handles)

    raise ValueError(f"Invalid backend: {backend}")
