import logging

from dynkin_vi import artifacts
from dynkin_vi.commands import Command
from dynkin_vi.constants import MissingArtifacts

log = logging.getLogger(__name__)


class Report(Command, name="report", help="merge diagnostics, oracle and verification artifacts"):
    def run(self, args) -> int:
        problem = self.problem(args)
        out = self.out_dir(problem)
        sections = {}
        for key, name in (
            ("diagnostics", artifacts.DIAGNOSTICS_FILE),
            ("oracle", artifacts.ORACLE_FILE),
            ("verification", artifacts.VERIFICATION_FILE),
        ):
            path = out / name
            if path.is_file():
                sections[key] = artifacts.read_json(path)
        if not sections:
            raise MissingArtifacts(f"no artifacts in {out}; run solve, compare-oracle or verify first")

        verdicts = {key: bool(section["passed"]) for key, section in sections.items() if "passed" in section}
        report = {
            "name": problem.config.name,
            "sections": sections,
            "verdicts": verdicts,
            "passed": all(verdicts.values()),
        }
        artifacts.write_json(out / artifacts.REPORT_FILE, report)
        log.info(f"Report for '{problem.config.name}': {'pass' if report['passed'] else 'FAIL'}")
        return 0 if report["passed"] else 1


def setup(app):
    app.add_command(Report(app))
