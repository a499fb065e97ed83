"""Logger helpers shared by the library modules and the CLI."""

import logging

ROOT_LOGGER = "eigensde"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name):
    """Return a logger living under the ``eigensde`` namespace."""
    if name == ROOT_LOGGER or name.startswith(ROOT_LOGGER + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def configure_logging(level="INFO"):
    """Install a single stream handler on the package logger (CLI only)."""
    logger = logging.getLogger(ROOT_LOGGER)
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    logger.setLevel(level)
    if not any(getattr(h, "_eigensde", False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._eigensde = True
        logger.addHandler(handler)
    return logger
