import json
import os

import numpy as np

from network.services import AudioConditionedUNet

from ...benchmark import run_benchmark, write_latencies, write_summary
from ..base import PipelineCommand, load_trained_model, usage_error


class Command(PipelineCommand):
    help = "Measure the per-step latency of the tracker"

    def add_command_arguments(self, parser):
        parser.add_argument("--model", help="model file (default a freshly initialized model)")
        parser.add_argument("--height", type=int, default=192, help="page height at model resolution")
        parser.add_argument("--width", type=int, default=256)
        parser.add_argument("--steps", type=int, default=1000)
        parser.add_argument("--warmup", type=int, default=50)
        parser.add_argument("--stride", type=int)
        parser.add_argument("--out", help="directory for bench.csv and latency.csv")

    def overrides(self, options):
        return {"output_dir": options["out"], "stride": options["stride"]}

    def run(self, config, options):
        if options["steps"] < 1 or options["warmup"] < 0 or config["stride"] < 1:
            raise usage_error("--steps and --stride must be positive and --warmup non-negative")
        if options["model"]:
            model = load_trained_model(options["model"], config)
        else:
            model = AudioConditionedUNet.initialize(config.model_config(), seed=config["seed"])
        page = np.random.default_rng(config["seed"]).random((options["height"], options["width"]))

        result = run_benchmark(model, page, options["steps"], options["warmup"], config["stride"], config["seed"])
        out = config["output_dir"]
        os.makedirs(out, exist_ok=True)
        write_summary(result, os.path.join(out, "bench.csv"))
        write_latencies(result, os.path.join(out, "latency.csv"))
        config.write(out)
        self.stdout.write(json.dumps(result.summary(), indent=2))
