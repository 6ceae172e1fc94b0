import os

from dataset.storage import load_dataset
from evaluation.choices import EvalMode
from evaluation.services import evaluate, write_onsets, write_report

from ..base import PipelineCommand, load_trained_model, usage_error


def select_pieces(dataset, split):
    """Pieces of a named split, or every piece for ``all``."""
    return list(dataset.pieces) if split == "all" else dataset.split(split)


class Command(PipelineCommand):
    help = "Evaluate a model (or the ground-truth oracle) on a dataset split"

    def add_command_arguments(self, parser):
        parser.add_argument("--model", help="model file (default <output dir>/best.model)")
        parser.add_argument("--data", help="dataset directory (default PGTK_DATA_DIR)")
        parser.add_argument("--split", default="test", help="train, val, test or all")
        parser.add_argument("--out", help="directory for report.json and onsets.csv")
        parser.add_argument("--mode", help=f"one of {', '.join(EvalMode.get_values())}")
        parser.add_argument("--oracle", action="store_true", help="score the ground-truth masks themselves")
        parser.add_argument("--per-piece", action="store_true", default=None, help="average errors per piece")
        parser.add_argument("--stride", type=int)
        parser.add_argument("--threshold", type=float)
        parser.add_argument("--unweighted", action="store_true", help="unweighted center of mass")

    def overrides(self, options):
        return {
            "data_dir": options["data"],
            "output_dir": options["out"],
            "mode": options["mode"],
            "per_piece": options["per_piece"],
            "stride": options["stride"],
            "threshold": options["threshold"],
            "weighted": False if options["unweighted"] else None,
        }

    def run(self, config, options):
        if config["mode"] not in EvalMode.get_values():
            raise usage_error(f"unknown mode {config['mode']!r}")
        if config["stride"] < 1:
            raise usage_error("--stride must be at least 1")
        mode = EvalMode(config["mode"])
        model = None if options["oracle"] else load_trained_model(options["model"], config)
        pieces = select_pieces(load_dataset(config["data_dir"]), options["split"])
        if not pieces:
            raise usage_error(f"split {options['split']!r} has no pieces")

        report, rows = evaluate(
            model, pieces, mode, config["threshold"], config["weighted"], options["oracle"], config["per_piece"],
            config["stride"], progress=options["verbosity"] >= 1,
        )
        out = config["output_dir"]
        os.makedirs(out, exist_ok=True)
        write_report(report, os.path.join(out, "report.json"))
        if mode.includes(EvalMode.TEMPORAL):
            write_onsets(rows, os.path.join(out, "onsets.csv"))
        config.write(out)

        self.stdout.write(f"{len(pieces)} pieces, {report.frames} frames, {report.unpredicted_frames} unpredicted")
        if mode.includes(EvalMode.PIXEL):
            self.stdout.write(f"P {report.precision:.3f}  R {report.recall:.3f}  F1 {report.f1:.3f}")
        if mode.includes(EvalMode.GEOMETRIC) and report.mean_err_cm is not None:
            self.stdout.write(f"mean error {report.mean_err_cm:.3f} cm  median {report.median_err_cm:.3f} cm")
        if mode.includes(EvalMode.TEMPORAL):
            self.stdout.write("threshold  tracked onsets")
            for tau, fraction in report.onset_table.items():
                self.stdout.write(f"{tau:>7.2f} s  {100 * fraction:6.1f} %")
