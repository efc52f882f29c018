import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    log_level: str = "INFO"
    log_file: str = "hashalloc.log"
    workers: int = 1
    min_history_days: int = 30
    focus_chain: str = "BCH"
    max_fill_hours: int = 6


def _int_env(name, default):
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        # logger is not configured yet
        return default


def load_settings():
    """Reads HASHALLOC_* variables (after .env) into a Settings object."""
    return Settings(
        log_level=os.getenv("HASHALLOC_LOG_LEVEL", "INFO").upper(),
        log_file=os.getenv("HASHALLOC_LOG_FILE", "hashalloc.log"),
        workers=max(1, _int_env("HASHALLOC_WORKERS", 1)),
        min_history_days=max(0, _int_env("HASHALLOC_MIN_HISTORY_DAYS", 30)),
        focus_chain=os.getenv("HASHALLOC_FOCUS_CHAIN", "BCH"),
        max_fill_hours=max(0, _int_env("HASHALLOC_MAX_FILL_HOURS", 6)),
    )


settings = load_settings()
