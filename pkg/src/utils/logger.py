"""
Logging configuration using structlog
"""
import structlog
import logging
import sys

_configured_level = None


def setup_logging(log_level: str = None):
    """Configure structured logging (idempotent unless the level changes)"""
    global _configured_level

    if log_level is None:
        from src.utils.config import get_settings
        log_level = get_settings().stdlib_log_level
    level = log_level.upper()
    if level == "WARN":
        level = "WARNING"
    if level == _configured_level:
        return

    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level),
        force=True,
    )

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=False,
    )
    _configured_level = level


def get_logger(name: str = None):
    """Get a logger instance"""
    setup_logging()
    return structlog.get_logger(name)
