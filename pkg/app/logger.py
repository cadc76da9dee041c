import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

from loguru import logger as _logger

from app.config import PROJECT_ROOT


_print_level = "INFO"

_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | "
    "<cyan>{extra[component]}</cyan> - <level>{message}</level>"
)


def define_log_level(
    print_level: str = "INFO",
    logfile_level: str = "DEBUG",
    name: str = None,
    log_dir: Optional[Path] = None,
):
    """Route logs to stderr at ``print_level`` and to a timestamped file.

    The file lands in ``log_dir`` (default ``<project>/logs``). Log output is
    never read back by the simulator, so metrics files stay reproducible.
    """
    global _print_level
    _print_level = print_level

    formatted_date = datetime.now().strftime("%Y%m%d%H%M%S")
    log_name = f"{name}_{formatted_date}" if name else formatted_date

    _logger.remove()
    _logger.configure(extra={"component": "tsflora"})
    _logger.add(sys.stderr, level=print_level, format=_FORMAT)
    _logger.add(
        (log_dir or PROJECT_ROOT / "logs") / f"{log_name}.log",
        level=logfile_level,
        format=_FORMAT,
    )
    return _logger


def component_logger(component: str, **context):
    """Logger tagged with a subsystem name (and e.g. round/client ids)."""
    return _logger.bind(component=component, **context)


logger = define_log_level()
