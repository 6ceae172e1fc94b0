import os

import numpy as np
import pandas as pd
from django.conf import settings
from PIL import Image

from dataset.storage import load_dataset
from tracking.services import ScoreTracker, score_time, standardized_frames

from ..base import PipelineCommand, load_trained_model, usage_error

COLUMNS = ["step", "time_s", "x", "y", "predicted_score_time_s", "latency_ms"]


def dump_mask(mask, path):
    Image.fromarray(np.round(np.clip(mask, 0.0, 1.0) * 255).astype(np.uint8)).save(path, format="PPM")


class Command(PipelineCommand):
    help = "Follow one piece frame by frame and write the positions as CSV"

    def add_command_arguments(self, parser):
        parser.add_argument("--model", help="model file (default <output dir>/best.model)")
        parser.add_argument("--data", help="dataset directory (default PGTK_DATA_DIR)")
        parser.add_argument("--piece", help="piece id (default the first test piece)")
        parser.add_argument("--out", help="output directory (default PGTK_OUTPUT_DIR)")
        parser.add_argument("--mask-dump", help="directory for one PGM mask per frame")
        parser.add_argument("--stride", type=int, help="run the U-Net every k-th frame")
        parser.add_argument("--threshold", type=float)
        parser.add_argument("--unweighted", action="store_true", help="unweighted center of mass")

    def overrides(self, options):
        return {
            "data_dir": options["data"],
            "output_dir": options["out"],
            "stride": options["stride"],
            "threshold": options["threshold"],
            "weighted": False if options["unweighted"] else None,
        }

    def run(self, config, options):
        if config["stride"] < 1:
            raise usage_error("--stride must be at least 1")
        model = load_trained_model(options["model"], config)
        dataset = load_dataset(config["data_dir"])
        try:
            piece = dataset.get(options["piece"]) if options["piece"] else (dataset.split("test") or dataset.pieces)[0]
        except KeyError:
            raise usage_error(f"no piece {options['piece']!r} in {config['data_dir']}") from None

        page, track = piece.model_view
        tracker = ScoreTracker(model, page, config["threshold"], config["weighted"], config["stride"])
        mask_dir = options["mask_dump"]
        if mask_dir:
            os.makedirs(mask_dir, exist_ok=True)
        fps = settings.PAGETRACK["FPS"]
        rows = []
        for step, frame in enumerate(standardized_frames(model, piece)):
            prediction = tracker.step(frame)
            x, y = prediction.position if prediction.position is not None else (None, None)
            rows.append({
                "step": step,
                "time_s": step / fps,
                "x": x,
                "y": y,
                "predicted_score_time_s": score_time(prediction.position, page, track) if x is not None else None,
                "latency_ms": prediction.step_latency * 1000.0,
            })
            if mask_dir:
                dump_mask(prediction.mask, os.path.join(mask_dir, f"{piece.id}_{step:05d}.pgm"))

        out = config["output_dir"]
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, f"track_{piece.id}.csv")
        pd.DataFrame(rows, columns=COLUMNS).to_csv(path, index=False)
        config.write(out)
        self.stdout.write(f"Tracked {piece.id}: {len(rows)} frames written to {path}")
