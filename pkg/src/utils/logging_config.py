"""Logging configuration for the ObstacleFusion engine."""

import logging
import logging.handlers
from pathlib import Path
from typing import Any, Dict, Optional

APP_LOGGER = 'obstacle_fusion'


def setup_logging(config: Dict[str, Any], level: Optional[str] = None) -> logging.Logger:
    """Set up logging based on configuration.

    Args:
        config: Logging configuration section
        level: Optional level overriding ``config['level']``

    Returns:
        Configured application logger; module loggers are its children
    """
    log_level = (level or config.get('level', 'INFO')).upper()
    if not isinstance(logging.getLevelName(log_level), int):
        log_level = 'INFO'
    log_format = config.get('format', '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    log_file = config.get('file')

    logger = logging.getLogger(APP_LOGGER)
    logger.setLevel(log_level)

    # Remove existing handlers to avoid duplicates
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(log_format)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_path,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Get the application logger, or one of its children.

    Args:
        name: Child name such as ``'inference'``; ``None`` for the root app logger
    """
    if name is None:
        return logging.getLogger(APP_LOGGER)
    if name.startswith(APP_LOGGER):
        return logging.getLogger(name)
    return logging.getLogger(f'{APP_LOGGER}.{name}')
