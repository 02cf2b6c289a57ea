import logging

from dynkin_vi import artifacts
from dynkin_vi.commands import Command

log = logging.getLogger(__name__)


class CompareOracle(Command, name="compare-oracle", help="compare the solver with the projected-relaxation oracle"):
    def add_arguments(self, parser):
        parser.add_argument("--tolerance", type=float, default=1e-6, help="max-norm agreement required (default 1e-6)")
        parser.add_argument("--from-artifacts", action="store_true", help="use the solution saved by `solve`")

    def run(self, args) -> int:
        problem = self.problem(args)
        out = self.out_dir(problem)
        if args.from_artifacts:
            solution = artifacts.load_solution(out, problem.config.canonical_json(), problem)
        else:
            solution = problem.solve()
        result = problem.compare_oracle(solution)
        result["tolerance"] = args.tolerance
        result["passed"] = result["max_abs_diff"] <= args.tolerance
        artifacts.write_json(out / artifacts.ORACLE_FILE, result)
        return 0 if result["passed"] else 1


def setup(app):
    app.add_command(CompareOracle(app))
