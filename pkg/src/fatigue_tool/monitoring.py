"""Monitoring setup: structlog logging and optional Sentry error tracking.

Logging goes to stderr to keep stdout clean for tables and data output.
Sentry is only initialised when a DSN is configured:
FATIGUE_TOOL_SENTRY_DSN env var > config file sentry_dsn > disabled.
"""

import logging
import os
import sys
from typing import Any

import sentry_sdk
import structlog

from fatigue_tool.__about__ import __version__
from fatigue_tool.config import load_config
from fatigue_tool.exceptions import ConfigurationError

DSN_ENV_VAR = "FATIGUE_TOOL_SENTRY_DSN"

_LOG_LEVELS: dict[str, int] = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
    "critical": logging.CRITICAL,
}


def setup_logging(verbose: bool = False) -> None:
    log_level = "debug" if verbose else "info"

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty()),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(_LOG_LEVELS[log_level]),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def get_logger(name: str | None = None) -> Any:
    """Lazy logger; configuration is resolved at the first log call, not at import.

    The name is bound as ``logger_name`` so module-level loggers stay lazy proxies.
    """
    if name:
        return structlog.get_logger(logger_name=name)
    return structlog.get_logger()


def mask_secret(secret: str | None) -> str:
    if secret:
        return f"***...{secret[-4:]}"
    return "(not set)"


def resolve_dsn() -> str | None:
    """FATIGUE_TOOL_SENTRY_DSN first, then sentry_dsn from the config file."""
    dsn = os.environ.get(DSN_ENV_VAR)
    if dsn:
        return dsn

    try:
        config = load_config()
    except ConfigurationError:
        return None
    return config.sentry_dsn


def setup_sentry(environment: str = "local") -> bool:
    """Initialise sentry-sdk when a DSN is configured; returns whether it was enabled."""
    dsn = resolve_dsn()
    if not dsn:
        return False
    sentry_sdk.init(
        dsn=dsn,
        traces_sample_rate=0.0,
        environment=environment,
        release=__version__,
        attach_stacktrace=True,
        send_default_pii=False,
    )
    get_logger("monitoring").debug("sentry_enabled", dsn=mask_secret(dsn), environment=environment)
    return True
