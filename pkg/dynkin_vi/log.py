import logging
from contextlib import contextmanager
from contextvars import ContextVar
from logging import Logger

from dynkin_vi import constants

_stage: ContextVar[str] = ContextVar("dynkin_vi_stage", default="")


@contextmanager
def stage(label: str):
    """Tag every record logged inside the block with `label`; nested stages are joined."""
    outer = _stage.get()
    token = _stage.set(f"{outer} / {label}" if outer else label)
    try:
        yield
    finally:
        _stage.reset(token)


class StageFilter(logging.Filter):
    """Adds `where`: the module without the package prefix, plus the current solver stage."""

    def filter(self, record):
        module = record.name.removeprefix("dynkin_vi.")
        current = _stage.get()
        record.where = f"{module} [{current}]" if current else module
        return True


class LoggingFormatter(logging.Formatter):
    # Colors
    gray = "\x1b[38m"
    red = "\x1b[31m"
    yellow = "\x1b[33m"
    blue = "\x1b[34m"
    cyan = "\x1b[36m"
    # Styles
    reset = "\x1b[0m"
    bold = "\x1b[1m"
    faint = "\x1b[2m"

    COLORS = {
        logging.DEBUG: gray + bold,
        logging.INFO: blue + bold,
        logging.WARNING: yellow + bold,
        logging.ERROR: red,
        logging.CRITICAL: red + bold,
    }

    def format(self, record):
        # solver runs are read by elapsed time, not wall clock
        elapsed = f"{self.faint}{record.relativeCreated / 1000.0:9.3f}s{self.reset}"
        level = f"{self.COLORS[record.levelno]}{record.levelname:<8}{self.reset}"
        where = f"{self.cyan}{getattr(record, 'where', record.name)}{self.reset}"
        line = f"{elapsed} {level} {where} {record.getMessage()}"
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


def setup(log_file: str | None = None, level: str | None = None) -> Logger:
    file_handler = logging.FileHandler(
        filename=log_file or constants.App.log_file, encoding="utf-8", mode="w"
    )
    file_handler_formatter = logging.Formatter(
        "[{asctime}] [{levelname:<8}] {where}: {message}", "%Y-%m-%d %H:%M:%S", style="{"
    )

    file_handler.setFormatter(file_handler_formatter)
    logger = logging.getLogger("dynkin_vi")
    logger.setLevel(getattr(logging, (level or constants.App.log_level).upper()))
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(LoggingFormatter())

    # repeated setup (tests, several CLI runs in one process) must not stack handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    for handler in (console_handler, file_handler):
        handler.addFilter(StageFilter())
        logger.addHandler(handler)
    return logger
