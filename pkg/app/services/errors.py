class BlsError(Exception):
    """Root of every error raised by the communication library and its drivers."""


class ConfigError(BlsError, ValueError):
    pass


class CommError(BlsError):
    """Transport failure. The communicator that raised it is unusable afterwards."""


class SetupError(CommError):
    pass


class CommTimeoutError(CommError):
    def __init__(self, tag: int, observed: int, expected: int, window: str = "data"):
        self.tag = tag
        self.observed = observed
        self.expected = expected
        self.window = window
        super().__init__(
            f"timed out waiting on window {window!r} tag {tag}: "
            f"observed {observed} of {expected} messages"
        )


class ProtocolError(BlsError):
    pass


class HazardError(ProtocolError):
    def __init__(self, rank: int, source: int, expected: int, observed: int):
        self.rank = rank
        self.source = source
        self.expected = expected
        self.observed = observed
        super().__init__(
            f"slot reuse hazard at rank {rank}: segment from source {source} "
            f"holds iteration {observed}, expected {expected}"
        )


class WorkloadError(BlsError, ValueError):
    pass


class MetricsError(BlsError, ValueError):
    pass
