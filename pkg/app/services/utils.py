import asyncio
import hashlib
import logging
import time
import typing

logger = logging.getLogger(__name__)


async def retry_with_backoff(
    func: typing.Callable,
    deadline_s: float,
    base_delay: float = 0.05,
    max_delay: float = 1.0,
    retry_on: typing.Tuple[typing.Type[BaseException], ...] = (OSError,),
    **kwargs,
) -> typing.Any:
    """
    Retry a coroutine function with exponential backoff until it succeeds or
    the deadline passes. The last error is re-raised once time runs out.
    """
    start = time.monotonic()
    attempt = 0
    while True:
        try:
            return await func(**kwargs)
        except retry_on as e:
            elapsed = time.monotonic() - start
            delay = min(base_delay * (2**attempt), max_delay)
            if elapsed + delay > deadline_s:
                raise
            logger.debug(f"Attempt {attempt + 1} failed ({e}); retrying in {delay:.2f}s")
            await asyncio.sleep(delay)
            attempt += 1


def get_split_lengths_by_len(n: int, world_size: int) -> typing.List[int]:
    """Contiguous row-block split: the first ``n % world_size`` ranks get one extra row."""
    k, m = divmod(n, world_size)
    return [(k + 1) if i < m else k for i in range(world_size)]


def split_offsets(lengths: typing.Sequence[int]) -> typing.List[int]:
    offsets = [0]
    for length in lengths:
        offsets.append(offsets[-1] + length)
    return offsets


def digest(*parts: typing.Any) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x00")
    return h.digest()[:8]


def checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def parse_size(text: str) -> int:
    """Parse ``32K``/``1M``/``64`` into a byte count."""
    text = text.strip().upper().rstrip("B")
    scale = 1
    if text.endswith("K"):
        scale, text = 1024, text[:-1]
    elif text.endswith("M"):
        scale, text = 1024 * 1024, text[:-1]
    return int(text) * scale


def parse_int_list(text: str) -> typing.List[int]:
    return [parse_size(part) for part in text.split(",") if part.strip()]
