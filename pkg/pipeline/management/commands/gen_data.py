import os
import shutil

from dataset.generator import generate_dataset
from dataset.storage import save_dataset

from ..base import PipelineCommand, runtime_failure, usage_error

FLAGS = ("pieces", "height", "width", "staves", "notes_per_staff", "notes_per_bar", "ambiguity", "features_only",
         "reverb", "val_fraction", "test_fraction")


class Command(PipelineCommand):
    help = "Generate a synthetic dataset of score pages, alignments and audio"

    def add_command_arguments(self, parser):
        parser.add_argument("--out", help="dataset directory (default PGTK_DATA_DIR)")
        parser.add_argument("--pieces", type=int)
        parser.add_argument("--height", type=int, help="page height at model resolution")
        parser.add_argument("--width", type=int, help="page width at model resolution")
        parser.add_argument("--staves", type=int)
        parser.add_argument("--notes-per-staff", type=int)
        parser.add_argument("--notes-per-bar", type=int)
        parser.add_argument("--ambiguity", action="store_true", default=None, help="duplicate one bar per piece")
        parser.add_argument("--features-only", action="store_true", default=None,
                            help="store spectrograms instead of audio")
        parser.add_argument("--reverb", type=float, help="RT60 in seconds of added reverberation")
        parser.add_argument("--val-fraction", type=float)
        parser.add_argument("--test-fraction", type=float)
        parser.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    def overrides(self, options):
        return {"data_dir": options["out"], **{key: options[key] for key in FLAGS}}

    def run(self, config, options):
        if config["pieces"] < 1:
            raise usage_error("--pieces must be at least 1")
        out = config["data_dir"]
        if os.path.isdir(out) and os.listdir(out):
            if not options["force"]:
                raise runtime_failure(f"{out} is not empty; pass --force to replace it")
            shutil.rmtree(out)

        generator = config.generator_config()
        dataset = generate_dataset(
            config["pieces"], config["seed"], generator, config["val_fraction"], config["test_fraction"]
        )
        save_dataset(dataset, out, extra={"root_seed": config["seed"], "generator": generator.to_dict()})
        config.write(out)
        ambiguous = sum(p.ambiguous for p in dataset)
        self.stdout.write(f"Wrote {len(dataset)} pieces ({ambiguous} ambiguous) to {out}")
