import logging

from typing import Optional

__all__ = ["logger", "configure_logging"]

logger = logging.getLogger("ortho-probe")

def configure_logging(level: Optional[str]=None) -> None:
    """
    Configures the root handler once for command-line use.

    :param level: The level name, e.g. `INFO`. Defaults to `WARNING`.
    """
    logging.basicConfig(
        level=(level or "WARNING").upper(),
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s"
    )
