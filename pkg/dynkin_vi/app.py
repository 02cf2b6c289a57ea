import argparse
import importlib
import json
import logging
import sys

from dynkin_vi import constants
from dynkin_vi.commands import Command
from dynkin_vi.constants import DynkinVIException

log = logging.getLogger(__name__)


class DynkinVI:
    """Command-line application; subcommands are plugins listed in config.yml."""

    def __init__(self, prog: str = "dynkin_vi"):
        self.parser = argparse.ArgumentParser(
            prog=prog, description="Optimal stopping and Dynkin game solver with Monte Carlo verification"
        )
        self.subparsers = self.parser.add_subparsers(dest="command", metavar="COMMAND")
        self.subparsers.required = True
        self.commands: dict[str, Command] = {}

    def load_commands(self) -> None:
        for name in constants.Commands.enabled:
            try:
                module = importlib.import_module("dynkin_vi.commands." + name)
                module.setup(self)
                log.debug(f"Loaded command '{name}'")
            except Exception as e:
                log.error(f"Failed to load command {name}. Reason: {type(e).__name__}: {e}")

    def add_command(self, command: Command) -> None:
        parser = self.subparsers.add_parser(command.name, help=command.help)
        parser.add_argument("--config", required=True, help="problem config (JSON)")
        parser.add_argument("--seed", type=int, help="override mc.seed")
        parser.add_argument("--paths", type=int, help="override mc.n_paths")
        parser.add_argument("--out", help="override output.dir")
        command.add_arguments(parser)
        parser.set_defaults(handler=command)
        self.commands[command.name] = command

    def run(self, argv=None) -> int:
        args = self.parser.parse_args(argv)
        try:
            return int(args.handler.run(args))
        except DynkinVIException as e:
            log.error(f"{args.command} failed: {e}")
            print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
            return e.exit_code
