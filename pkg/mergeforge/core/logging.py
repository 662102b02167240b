import logging
from typing import Optional

from mergeforge.core.config import settings

_configured = False


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once from settings; later calls only adjust the level."""
    global _configured
    level_name = (level or settings.LOG_LEVEL).upper()

    if not _configured:
        logging.basicConfig(level=level_name, format=settings.LOG_FORMAT)
        _configured = True
    logging.getLogger().setLevel(level_name)
