import enum
import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic.v1 import BaseSettings


class LogLevel(enum.Enum):
    ERROR = "error"
    INFO = "info"
    TRACE = "trace"


_LEVELS = {
    LogLevel.ERROR: logging.ERROR,
    LogLevel.INFO: logging.INFO,
    LogLevel.TRACE: logging.DEBUG,
}


class Settings(BaseSettings):
    BLS_COMM_TIMEOUT_MS: int = 30_000
    BLS_WAIT_TIMEOUT_MS: int = 60_000
    BLS_RUN_BUDGET_S: float = 120.0
    BLS_LOG: LogLevel = LogLevel.INFO

    class Config:
        # Get env file from base directory
        env_file = Path(__file__).parent.parent / ".env"
        frozen = True

    @property
    def comm_timeout_s(self) -> float:
        return self.BLS_COMM_TIMEOUT_MS / 1000.0

    @property
    def wait_timeout_s(self) -> Optional[float]:
        if self.BLS_WAIT_TIMEOUT_MS <= 0:
            return None
        return self.BLS_WAIT_TIMEOUT_MS / 1000.0


@lru_cache()
def get_settings() -> Settings:
    return Settings()


def configure_logging(level: Optional[LogLevel] = None) -> None:
    level = level or get_settings().BLS_LOG
    logging.basicConfig(
        level=_LEVELS[LogLevel(level)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
