import logging

from dynkin_vi import artifacts
from dynkin_vi.commands import Command

log = logging.getLogger(__name__)


class Solve(Command, name="solve", help="solve the problem and write value fields and diagnostics"):
    def run(self, args) -> int:
        problem = self.problem(args)
        out = self.out_dir(problem)
        solution = problem.solve()
        artifacts.write_solution_fields(out, solution)
        artifacts.write_json(out / artifacts.DIAGNOSTICS_FILE, problem.diagnostics(solution))
        artifacts.save_solution(out, problem.config.canonical_json(), solution)
        log.info(f"Solved '{problem.config.name}', artifacts in {out}")
        return 0


def setup(app):
    app.add_command(Solve(app))
