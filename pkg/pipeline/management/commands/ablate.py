import logging
import os
from dataclasses import replace

import pandas as pd

from dataset.augmentation import augment_tempo
from dataset.storage import load_dataset
from evaluation.choices import EvalMode
from evaluation.services import evaluate
from network.choices import EncoderKind
from training.services import train

from ..base import PipelineCommand, usage_error

logger = logging.getLogger(__name__)

COLUMNS = ["configuration", "encoder", "tempo_aug", "precision", "recall", "f1", "mean_err_cm", "median_err_cm"]


def _csv_list(value, cast):
    return [cast(item) for item in value.split(",") if item.strip()]


def perturbed_pieces(pieces, factors):
    """Every piece played at every tempo factor, ids suffixed with the factor."""
    return [replace(augment_tempo(piece, factor), id=f"{piece.id}@{factor:g}") for piece in pieces for factor in factors]


class Command(PipelineCommand):
    help = "Train every encoder with and without tempo augmentation and compare them on tempo-perturbed pieces"

    def add_command_arguments(self, parser):
        parser.add_argument("--data", help="dataset directory (default PGTK_DATA_DIR)")
        parser.add_argument("--out", help="directory for the runs and ablation.csv")
        parser.add_argument("--encoders", default="ntc,cb,fb")
        parser.add_argument("--factors", default="0.75,1.25", help="tempo factors of the evaluation pieces")
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--windows-per-piece", type=int)

    def overrides(self, options):
        return {
            "data_dir": options["data"],
            "output_dir": options["out"],
            "max_epochs": options["epochs"],
            "windows_per_piece": options["windows_per_piece"],
        }

    def run(self, config, options):
        encoders = _csv_list(options["encoders"], str)
        unknown = [e for e in encoders if e not in EncoderKind.get_values()]
        if not encoders or unknown:
            raise usage_error(f"encoders must be taken from {', '.join(EncoderKind.get_values())}")
        try:
            factors = _csv_list(options["factors"], float)
        except ValueError:
            raise usage_error(f"--factors must be comma-separated numbers, got {options['factors']!r}") from None
        if not factors or min(factors) <= 0:
            raise usage_error("tempo factors must be positive")

        dataset = load_dataset(config["data_dir"])
        held_out = dataset.split("test") or dataset.split("val")
        pieces = perturbed_pieces(held_out, factors)
        out = config["output_dir"]
        config.write(out)

        rows = []
        for encoder in encoders:
            for tempo_aug in (False, True):
                name = f"{encoder}+ta" if tempo_aug else encoder
                run = config.updated(encoder=encoder, tempo_aug=tempo_aug)
                result = train(dataset, run.model_config(), run.train_config(), os.path.join(out, name),
                               progress=options["verbosity"] >= 2)
                report, _ = evaluate(result.model, pieces, EvalMode.ALL, run["threshold"], run["weighted"])
                rows.append({
                    "configuration": name,
                    "encoder": encoder,
                    "tempo_aug": tempo_aug,
                    "precision": report.precision,
                    "recall": report.recall,
                    "f1": report.f1,
                    "mean_err_cm": report.mean_err_cm,
                    "median_err_cm": report.median_err_cm,
                })
                logger.info(f"{name}: F1 {report.f1:.3f}, mean error {report.mean_err_cm} cm")

        table = pd.DataFrame(rows, columns=COLUMNS)
        table.to_csv(os.path.join(out, "ablation.csv"), index=False)
        self.stdout.write(table.to_string(index=False))
