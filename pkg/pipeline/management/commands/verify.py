from ...verification import format_matrix, run_checks
from ..base import PipelineCommand, runtime_failure


class Command(PipelineCommand):
    help = "Run gradient checks, FiLM and shape contracts and metric oracles"

    def add_command_arguments(self, parser):
        parser.add_argument("--inject-broken-gradient", action="store_true",
                            help="scale the tanh gradient so the gradient checks must fail")

    def run(self, config, options):
        results = run_checks(inject_broken_gradient=options["inject_broken_gradient"])
        for line in format_matrix(results):
            self.stdout.write(line)
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise runtime_failure(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        self.stdout.write(f"all {len(results)} checks passed")
