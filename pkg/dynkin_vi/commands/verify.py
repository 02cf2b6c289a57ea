import logging

from dynkin_vi import artifacts
from dynkin_vi.commands import Command

log = logging.getLogger(__name__)


class Verify(Command, name="verify", help="cross-check the solution by Monte Carlo simulation"):
    def add_arguments(self, parser):
        parser.add_argument(
            "--negative-control",
            action="store_true",
            help="also run the supermartingale check on the raw obstacle, which must be flagged",
        )
        parser.add_argument(
            "--from-artifacts", action="store_true", help="verify the solution saved by `solve` instead of solving again"
        )

    def run(self, args) -> int:
        problem = self.problem(args)
        out = self.out_dir(problem)
        if args.from_artifacts:
            solution = artifacts.load_solution(out, problem.config.canonical_json(), problem)
        else:
            solution = problem.solve()
        report = problem.verify(solution, negative_control=args.negative_control)
        artifacts.write_json(out / artifacts.VERIFICATION_FILE, report.to_dict())
        if not report.passed:
            log.warning(f"Verification failed: {', '.join(report.failures())}")
            return 1
        return 0


def setup(app):
    app.add_command(Verify(app))
