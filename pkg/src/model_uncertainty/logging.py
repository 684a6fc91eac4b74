"""
Structured logging configuration for model-uncertainty.

This module sets up structured logging using structlog so that solver
progress and test decisions can be followed in console or JSON form.
"""

import logging
import sys
from typing import Any

import structlog


def configure_logging(
    level: str = "INFO",
    json_logs: bool = False,
    service_name: str = "model-uncertainty",
) -> structlog.BoundLogger:
    """
    Configure structured logging for the application.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
        json_logs: Whether to output JSON formatted logs
        service_name: Service name to include in logs

    Returns:
        Configured structlog logger
    """
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level.upper()),
    )

    processors = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.StackInfoRenderer(),
        structlog.dev.set_exc_info,
    ]

    if json_logs:
        processors.extend(
            [structlog.processors.dict_tracebacks, structlog.processors.JSONRenderer()]
        )
    else:
        processors.extend([structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty())])

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(
            getattr(logging, level.upper())
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )

    logger = structlog.get_logger()
    logger = logger.bind(service=service_name)

    return logger


def get_logger(name: str | None = None) -> structlog.BoundLogger:
    """
    Get a logger instance with optional name context.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Configured logger instance
    """
    logger = structlog.get_logger()
    if name:
        logger = logger.bind(logger_name=name)
    return logger


def log_stage(
    logger: structlog.BoundLogger,
    stage: str,
    success: bool = True,
    **kwargs: Any,
) -> None:
    """
    Log completion of a pipeline stage.

    Args:
        logger: Logger instance
        stage: Stage label (oed, screen, detect, ...)
        success: Whether the stage completed
        **kwargs: Additional context
    """
    log_data: dict[str, Any] = {"stage": stage, "success": success, **kwargs}

    if success:
        logger.info("Pipeline stage completed", **log_data)
    else:
        logger.error("Pipeline stage failed", **log_data)


def log_test_decision(
    logger: structlog.BoundLogger,
    scenario: str,
    alpha_min: float,
    threshold: float,
    rejected: bool,
    **kwargs: Any,
) -> None:
    """
    Log the outcome of one confidence-ellipsoid test.

    Args:
        logger: Logger instance
        scenario: Scenario identifier
        alpha_min: Smallest level at which the validation estimate is on the
            calibration ellipsoid boundary
        threshold: Per-test level after Bonferroni correction
        rejected: Whether the model was rejected by this scenario
        **kwargs: Additional context
    """
    log_data: dict[str, Any] = {
        "scenario": scenario,
        "alpha_min": alpha_min,
        "threshold": threshold,
        "rejected": rejected,
        **kwargs,
    }

    if rejected:
        logger.warning("Scenario rejects model", **log_data)
    else:
        logger.info("Scenario accepts model", **log_data)
