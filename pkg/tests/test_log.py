"""
Tests for the console and file log format.
"""

import logging

import pytest

from dynkin_vi import log


@pytest.fixture
def logger(tmp_path):
    path = tmp_path / "run.log"
    logger = log.setup(str(path), "DEBUG")
    yield logger, path
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


class TestStages:
    """Records carry the module and the solver stage they were logged in."""

    def test_file_lines_name_module_and_stage(self, logger):
        root, path = logger
        child = logging.getLogger("dynkin_vi.obstacle")
        with log.stage("eps 1e-04"):
            child.info("slice 3 settled")
        child.info("done")
        root.handlers[-1].flush()
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].endswith("obstacle [eps 1e-04]: slice 3 settled")
        assert lines[1].endswith("obstacle: done")

    def test_nested_stages_are_joined(self, logger):
        _, path = logger
        child = logging.getLogger("dynkin_vi.game")
        with log.stage("outer 2 phi"), log.stage("eps 1e-08"):
            child.warning("damping")
        logging.getLogger("dynkin_vi").handlers[-1].flush()
        assert "game [outer 2 phi / eps 1e-08]: damping" in path.read_text(encoding="utf-8")

    def test_console_line_shows_elapsed_time(self):
        record = logging.LogRecord("dynkin_vi.forms", logging.INFO, __file__, 1, "assembled", None, None)
        log.StageFilter().filter(record)
        line = log.LoggingFormatter().format(record)
        assert "forms" in line and line.rstrip().endswith("assembled")
        assert "s\x1b[0m" in line
