"""
Subcommand plugins. Each module defines one Command subclass and a
`setup(app)` function that registers it, and is enabled by listing its
module name under `commands.enabled` in config.yml.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from dynkin_vi.problem import Problem, load_problem


class Command:
    name: str = ""
    help: str = ""

    def __init_subclass__(cls, name: str = "", help: str = "", **kwargs):
        super().__init_subclass__(**kwargs)
        cls.name = name or cls.__name__.lower()
        cls.help = help

    def __init__(self, app):
        self.app = app

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def run(self, args: argparse.Namespace) -> int:
        raise NotImplementedError

    @staticmethod
    def problem(args: argparse.Namespace) -> Problem:
        return load_problem(args.config, args.seed, args.paths, args.out)

    @staticmethod
    def out_dir(problem: Problem) -> Path:
        path = Path(problem.config.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
