import json
import logging
import os

from django.conf import settings

from dataset.storage import load_dataset
from network.choices import EncoderKind
from training.services import train
from training.tasks import train_model_task

from ..base import PipelineCommand, usage_error

logger = logging.getLogger(__name__)

FLAGS = {
    "encoder": "encoder",
    "tempo_aug": "tempo_aug",
    "reverb_aug": "reverb_aug",
    "epochs": "max_epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "seq_len": "seq_len",
    "windows_per_piece": "windows_per_piece",
}


class Command(PipelineCommand):
    help = "Train the audio-conditioned U-Net on a dataset directory"

    def add_command_arguments(self, parser):
        parser.add_argument("--data", help="dataset directory (default PGTK_DATA_DIR)")
        parser.add_argument("--out", help="run directory for models and history (default PGTK_OUTPUT_DIR)")
        parser.add_argument("--encoder", help=f"one of {', '.join(EncoderKind.get_values())}")
        parser.add_argument("--tempo-aug", action="store_true", default=None)
        parser.add_argument("--reverb-aug", type=float, help="RT60 of reverberant training copies")
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--batch-size", type=int, help="0 picks the encoder's default")
        parser.add_argument("--seq-len", type=int)
        parser.add_argument("--windows-per-piece", type=int)
        parser.add_argument("--background", action="store_true", help="run as a Celery task")

    def overrides(self, options):
        values = {key: options[flag] for flag, key in FLAGS.items()}
        values.update(data_dir=options["data"], output_dir=options["out"])
        return values

    def run(self, config, options):
        if config["encoder"] not in EncoderKind.get_values():
            raise usage_error(f"unknown encoder {config['encoder']!r}")
        data_dir, out = config["data_dir"], config["output_dir"]
        if not os.path.isdir(data_dir):
            raise usage_error(f"dataset directory {data_dir} does not exist")

        model_config = config.model_config()
        config = config.updated(batch_size=config.train_config().resolved_batch_size(model_config))
        train_config = config.train_config()
        config.write(out)
        logger.info(f"Training {model_config.encoder_kind} with batch size {train_config.batch_size} into {out}")

        if options["background"]:
            args = (data_dir, out, model_config.to_dict(), train_config.to_dict())
            if not settings.CELERY_TASK_ALWAYS_EAGER:
                result = train_model_task.delay(*args)
                self.stdout.write(f"Queued training task {result.id}")
                return
            summary = train_model_task.apply(args=args).get()
        else:
            dataset = load_dataset(data_dir)
            summary = train(dataset, model_config, train_config, out, progress=options["verbosity"] >= 1).summary()
        self.stdout.write(json.dumps(summary, indent=2, sort_keys=True))
