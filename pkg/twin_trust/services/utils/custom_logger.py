import logging
import os
from typing import Optional

LOG_ENV_VAR = "TWIN_TRUST_LOG"
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"
DEFAULT_LEVEL = "WARNING"


def resolve_level(value: Optional[str] = None) -> int:
    """Map a level name (or the TWIN_TRUST_LOG variable) to a logging level."""
    name = (value or os.getenv(LOG_ENV_VAR) or DEFAULT_LEVEL).strip().upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        logging.getLogger(__name__).warning(f"Unknown log level '{name}', using {DEFAULT_LEVEL}")
        return logging.WARNING
    return level


def configure_logging(value: Optional[str] = None) -> int:
    level = resolve_level(value)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    return level
