import json
import os
import shutil
import tempfile
from io import StringIO
from unittest import mock, skipUnless

import numpy as np
import pandas as pd
import yaml
from django.conf import settings
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, tag
from PIL import Image

from dataset.storage import load_dataset
from evaluation.services import n_frames
from network.choices import EncoderKind
from network.config import ModelConfig
from network.services import AudioConditionedUNet

from .benchmark import run_benchmark
from .config import CONFIG_FILE, RunConfig, RunConfigError
from .verification import VerificationFailure, check_film_identity, check_metric_oracles, collect_checks, run_checks

TINY_DATA = dict(pieces=4, height=64, width=96, staves=1, notes_per_staff=4, notes_per_bar=2)
TINY_RUN = dict(
    base_filters=2, context_frames=8, encoder_channels=[2, 4, 4], embedding_size=4, hidden_size=6, seq_len=4,
    windows_per_piece=1, max_epochs=1, shift_aug_max=2, lr=0.001,
)


def run(command, **options):
    stdout, stderr = StringIO(), StringIO()
    call_command(command, verbosity=0, stdout=stdout, stderr=stderr, **options)
    return stdout.getvalue()


def write_yaml(path, values):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(values, f)
    return path


def read_yaml(path):
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def tree_bytes(root):
    files = {}
    for directory, _, names in os.walk(root):
        for name in names:
            path = os.path.join(directory, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


class CommandTestCase(SimpleTestCase):
    """Shares one tiny generated dataset, a tiny-model config file and an untrained tiny model."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.root = tempfile.mkdtemp()
        cls.data_dir = os.path.join(cls.root, "data")
        run("gen_data", out=cls.data_dir, seed=7, **TINY_DATA)
        cls.config_path = write_yaml(os.path.join(cls.root, "tiny.yaml"), TINY_RUN)
        cls.model_path = os.path.join(cls.root, "tiny.model")
        AudioConditionedUNet.initialize(ModelConfig.tiny(), seed=0).save(cls.model_path)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)
        super().tearDownClass()

    def setUp(self):
        self.out = tempfile.mkdtemp(dir=self.root)

    def assertExitCode(self, code, command, **options):
        with self.assertRaises(CommandError) as ctx:
            run(command, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception


class RunConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmp, True)

    def test_defaults_follow_settings(self):
        config = RunConfig.resolve()
        self.assertEqual(config["threshold"], settings.PAGETRACK["THRESHOLD"])
        self.assertEqual(config["lr"], settings.PAGETRACK["LEARNING_RATE"])
        self.assertEqual(config["encoder"], settings.PAGETRACK["ENCODER"])
        self.assertEqual(config.model_config(), ModelConfig())

    def test_flags_override_file_and_file_overrides_defaults(self):
        path = write_yaml(os.path.join(self.tmp, "run.yaml"), {"lr": 0.01, "encoder": "fb", "seq_len": 8})
        config = RunConfig.resolve(path, lr=0.5, seq_len=None)
        self.assertEqual(config["lr"], 0.5)
        self.assertEqual(config["encoder"], "fb")
        self.assertEqual(config["seq_len"], 8)

    def test_unknown_key_is_rejected(self):
        path = write_yaml(os.path.join(self.tmp, "run.yaml"), {"learning_rate": 0.1})
        with self.assertRaisesMessage(RunConfigError, "learning_rate"):
            RunConfig.resolve(path)

    def test_nested_value_is_rejected(self):
        path = write_yaml(os.path.join(self.tmp, "run.yaml"), {"depth": {"value": 3}})
        with self.assertRaisesMessage(RunConfigError, "nested"):
            RunConfig.resolve(path)

    def test_wrong_type_is_rejected(self):
        with self.assertRaises(RunConfigError):
            RunConfig.resolve(depth="five")
        with self.assertRaises(RunConfigError):
            RunConfig.resolve(tempo_aug=1)
        self.assertEqual(RunConfig.resolve(lr=1)["lr"], 1.0)

    def test_not_a_mapping(self):
        path = os.path.join(self.tmp, "run.yaml")
        with open(path, "w", encoding="utf-8") as f:
            f.write("- lr\n- seed\n")
        with self.assertRaises(RunConfigError):
            RunConfig.resolve(path)

    def test_written_config_reproduces_the_run(self):
        config = RunConfig.resolve(seed=5, lr=0.01, encoder="ntc", data_dir="/somewhere")
        path = config.write(self.tmp)
        self.assertEqual(os.path.basename(path), CONFIG_FILE)
        self.assertNotIn("data_dir", read_yaml(path))
        self.assertEqual(RunConfig.resolve(path).to_dict(), config.to_dict())

    def test_component_configs(self):
        config = RunConfig.resolve(encoder="ntc", seed=3, staves=2, **TINY_RUN)
        self.assertEqual(config.model_config().kind, EncoderKind.NTC)
        self.assertEqual(config.model_config().encoder_channels, (2, 4, 4))
        self.assertEqual(config.train_config().seed, 3)
        self.assertEqual(config.train_config().seq_len, 4)
        self.assertEqual(config.generator_config().staves, 2)
        self.assertEqual(config.updated(batch_size=64).train_config().batch_size, 64)


class GenDataCommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmp, True)

    def test_same_seed_gives_identical_directories(self):
        first, second = os.path.join(self.tmp, "a"), os.path.join(self.tmp, "b")
        run("gen_data", out=first, seed=7, **TINY_DATA)
        run("gen_data", out=second, seed=7, **TINY_DATA)
        self.assertEqual(tree_bytes(first), tree_bytes(second))
        self.assertIn(CONFIG_FILE, tree_bytes(first))

    def test_manifest_records_seeds_and_ambiguity(self):
        out = os.path.join(self.tmp, "amb")
        run("gen_data", out=out, seed=3, ambiguity=True, **TINY_DATA)
        with open(os.path.join(out, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(len(manifest["pieces"]), 4)
        self.assertTrue(all(entry["ambiguous"] for entry in manifest["pieces"]))
        self.assertEqual(manifest["root_seed"], 3)
        self.assertEqual(manifest["splits"]["test"], ["piece003"])

    def test_zero_pieces_is_a_usage_error(self):
        with self.assertRaises(CommandError) as ctx:
            run("gen_data", out=os.path.join(self.tmp, "none"), **{**TINY_DATA, "pieces": 0})
        self.assertEqual(ctx.exception.returncode, 2)

    def test_non_empty_directory_needs_force(self):
        out = os.path.join(self.tmp, "busy")
        os.makedirs(out)
        with open(os.path.join(out, "notes.txt"), "w", encoding="utf-8") as f:
            f.write("keep")
        with self.assertRaises(CommandError) as ctx:
            run("gen_data", out=out, **TINY_DATA)
        self.assertEqual(ctx.exception.returncode, 1)
        run("gen_data", out=out, force=True, **TINY_DATA)
        self.assertFalse(os.path.exists(os.path.join(out, "notes.txt")))
        self.assertEqual(len(load_dataset(out)), 4)

    def test_features_only(self):
        out = os.path.join(self.tmp, "feats")
        run("gen_data", out=out, features_only=True, **TINY_DATA)
        piece = load_dataset(out).pieces[0]
        self.assertIsNone(piece.audio)
        self.assertEqual(piece.features.n_bins, 78)


class TrainCommandTests(CommandTestCase):
    def test_training_writes_models_history_and_config(self):
        output = run("train", data=self.data_dir, out=self.out, config=self.config_path, encoder="cb", tempo_aug=True)
        self.assertEqual(json.loads(output)["epochs"], 1)
        for name in ("best.model", "checkpoint.model", "history.csv", CONFIG_FILE):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)
        resolved = read_yaml(os.path.join(self.out, CONFIG_FILE))
        self.assertEqual(resolved["encoder"], "cb")
        self.assertTrue(resolved["tempo_aug"])
        self.assertEqual(resolved["batch_size"], settings.PAGETRACK["BATCH_SIZE"])
        self.assertEqual(AudioConditionedUNet.from_file(os.path.join(self.out, "best.model")).config.context_frames, 8)

    def test_ntc_forces_batch_64(self):
        run("train", data=self.data_dir, out=self.out, config=self.config_path, encoder="ntc")
        self.assertEqual(read_yaml(os.path.join(self.out, CONFIG_FILE))["batch_size"], 64)

    def test_background_task_runs_eagerly(self):
        output = run("train", data=self.data_dir, out=self.out, config=self.config_path, background=True)
        self.assertIn("best_epoch", json.loads(output))
        self.assertTrue(os.path.exists(os.path.join(self.out, "best.model")))

    def test_missing_dataset_is_a_usage_error(self):
        self.assertExitCode(2, "train", data=os.path.join(self.root, "missing"), out=self.out)

    def test_unknown_encoder_is_a_usage_error(self):
        self.assertExitCode(2, "train", data=self.data_dir, out=self.out, encoder="rnn")

    def test_invalid_dataset_is_itemized(self):
        broken = os.path.join(self.out, "broken")
        shutil.copytree(self.data_dir, broken)
        path = os.path.join(broken, "pieces", "piece001", "align.json")
        with open(path, encoding="utf-8") as f:
            align = json.load(f)
        align["events"][0]["onset"], align["events"][1]["onset"] = align["events"][1]["onset"], align["events"][0]["onset"]
        with open(path, "w", encoding="utf-8") as f:
            json.dump(align, f)
        stderr = StringIO()
        with self.assertRaises(CommandError) as ctx:
            call_command("train", data=broken, out=self.out, config=self.config_path, verbosity=0,
                         stdout=StringIO(), stderr=stderr)
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn("piece001", stderr.getvalue())


class TrackCommandTests(CommandTestCase):
    def test_one_row_per_frame(self):
        run("track", model=self.model_path, data=self.data_dir, out=self.out, piece="piece000")
        table = pd.read_csv(os.path.join(self.out, "track_piece000.csv"))
        piece = load_dataset(self.data_dir).get("piece000")
        self.assertEqual(list(table.columns), ["step", "time_s", "x", "y", "predicted_score_time_s", "latency_ms"])
        self.assertEqual(len(table), n_frames(piece))
        self.assertEqual(list(table["step"]), list(range(len(table))))
        np.testing.assert_allclose(table["time_s"], table["step"] / 20.0)
        self.assertTrue(os.path.exists(os.path.join(self.out, CONFIG_FILE)))

    def test_mask_dump(self):
        masks = os.path.join(self.out, "masks")
        run("track", model=self.model_path, data=self.data_dir, out=self.out, mask_dump=masks, stride=2)
        table = pd.read_csv(os.path.join(self.out, "track_piece003.csv"))
        dumps = sorted(os.listdir(masks))
        self.assertEqual(len(dumps), len(table))
        with Image.open(os.path.join(masks, dumps[0])) as image:
            self.assertEqual((image.mode, image.size), ("L", (96, 64)))

    def test_missing_model_fails(self):
        self.assertExitCode(1, "track", model=os.path.join(self.root, "none.model"), data=self.data_dir, out=self.out)

    def test_unknown_piece_is_a_usage_error(self):
        self.assertExitCode(2, "track", model=self.model_path, data=self.data_dir, out=self.out, piece="nope")


class EvaluateCommandTests(CommandTestCase):
    def report(self):
        with open(os.path.join(self.out, "report.json"), encoding="utf-8") as f:
            return json.load(f)

    def test_oracle_scores_perfectly(self):
        run("evaluate", oracle=True, data=self.data_dir, out=self.out, split="all")
        report = self.report()
        self.assertEqual((report["precision"], report["recall"], report["f1"]), (1.0, 1.0, 1.0))
        self.assertAlmostEqual(report["mean_err_cm"], 0.0)
        self.assertEqual(report["onset_table"]["5"], 1.0)
        self.assertEqual(report["unpredicted_frames"], 0)

    def test_temporal_mode_prints_the_onset_table(self):
        output = run("evaluate", oracle=True, data=self.data_dir, out=self.out, mode="temporal")
        self.assertIn("0.05 s", output)
        self.assertIn("100.0 %", output)
        self.assertIsNone(self.report()["f1"])
        onsets = pd.read_csv(os.path.join(self.out, "onsets.csv"))
        self.assertEqual(list(onsets.columns), ["piece", "onset_time", "predicted_time", "abs_error"])

    def test_model_evaluation(self):
        run("evaluate", model=self.model_path, data=self.data_dir, out=self.out, per_piece=True, split="val")
        report = self.report()
        self.assertEqual(report["aggregation"], "piece")
        self.assertEqual([p["piece"] for p in report["per_piece"]], ["piece002"])
        self.assertEqual(report["predicted_frames"] + report["unpredicted_frames"], report["frames"])

    def test_invalid_mode_is_a_usage_error(self):
        self.assertExitCode(2, "evaluate", oracle=True, data=self.data_dir, out=self.out, mode="visual")

    def test_empty_split_is_a_usage_error(self):
        self.assertExitCode(2, "evaluate", oracle=True, data=self.data_dir, out=self.out, split="holdout")


class VerifyCommandTests(SimpleTestCase):
    def test_all_checks_pass(self):
        checks = collect_checks()
        output = run("verify")
        self.assertIn(f"all {len(checks)} checks passed", output)
        self.assertNotIn("FAIL", output)

    def test_broken_gradient_fails(self):
        stdout = StringIO()
        with self.assertRaises(CommandError) as ctx:
            call_command("verify", inject_broken_gradient=True, verbosity=0, stdout=stdout)
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn("grad.tanh", str(ctx.exception))
        self.assertIn("FAIL", stdout.getvalue())

    def test_results_report_each_check(self):
        results = run_checks([("film.identity", check_film_identity)])
        self.assertEqual(len(results), 1)
        self.assertTrue(results[0].passed)

    def test_metric_oracles_cover_alignment_and_onset_tables(self):
        detail = check_metric_oracles()
        self.assertIn("1000 random mask pairs and onset lists", detail)

    def test_metric_oracles_catch_a_wrong_onset_table(self):
        def always_tracked(predicted, true, thresholds=None):
            return {float(tau): 1.0 for tau in thresholds}

        with mock.patch("pipeline.verification.onset_error_table", always_tracked):
            with self.assertRaises(VerificationFailure):
                check_metric_oracles(pairs=20)


class BenchCommandTests(CommandTestCase):
    def test_short_run_warns_and_writes_statistics(self):
        with self.assertLogs("pipeline.benchmark", "WARNING"):
            run("bench", model=self.model_path, height=32, width=32, steps=20, warmup=2, out=self.out)
        summary = pd.read_csv(os.path.join(self.out, "bench.csv")).iloc[0]
        self.assertEqual(summary["steps"], 20)
        self.assertLessEqual(summary["median_ms"], summary["p95_ms"])
        latencies = pd.read_csv(os.path.join(self.out, "latency.csv"))
        self.assertEqual(list(latencies["step"]), list(range(2, 22)))

    def test_step_count_is_exact(self):
        model = AudioConditionedUNet.initialize(ModelConfig.tiny(), seed=0)
        result = run_benchmark(model, np.zeros((32, 32)), steps=7, warmup=3, stride=2)
        self.assertEqual(result.summary()["steps"], 7)
        self.assertEqual(result.summary()["stride"], 2)

    def test_invalid_steps(self):
        self.assertExitCode(2, "bench", model=self.model_path, steps=0, out=self.out)


class AblateCommandTests(CommandTestCase):
    def test_table_has_a_row_per_configuration(self):
        run("ablate", data=self.data_dir, out=self.out, config=self.config_path, encoders="cb", factors="1.25")
        table = pd.read_csv(os.path.join(self.out, "ablation.csv"))
        self.assertEqual(list(table["configuration"]), ["cb", "cb+ta"])
        self.assertTrue(((table["f1"] >= 0) & (table["f1"] <= 1)).all())
        self.assertTrue(os.path.exists(os.path.join(self.out, "cb+ta", "best.model")))

    def test_unknown_encoder(self):
        self.assertExitCode(2, "ablate", data=self.data_dir, out=self.out, encoders="cb,lstm")

    def test_bad_factors(self):
        self.assertExitCode(2, "ablate", data=self.data_dir, out=self.out, factors="fast")


@tag("slow")
@skipUnless(settings.PAGETRACK["RUN_SLOW_TESTS"], "set PGTK_SLOW_TESTS=1")
class AcceptanceTests(SimpleTestCase):
    def test_constant_work_per_step(self):
        model = AudioConditionedUNet.initialize(ModelConfig(), seed=0)
        page = np.random.default_rng(0).random((192, 256))
        summary = run_benchmark(model, page, steps=1000, warmup=50).summary()
        self.assertLess(summary["cv"], 0.15)
        self.assertLess(abs(summary["last_mean_ms"] / summary["first_mean_ms"] - 1.0), 0.2)

    def test_context_and_tempo_augmentation_help(self):
        root = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, root, True)
        data = os.path.join(root, "data")
        run("gen_data", out=data, pieces=16, seed=1, ambiguity=True, staves=2, notes_per_staff=8)
        config = write_yaml(os.path.join(root, "budget.yaml"), {"max_epochs": 30, "windows_per_piece": 4})
        run("ablate", data=data, out=os.path.join(root, "runs"), config=config, encoders="ntc,cb",
            factors="0.75,1.25", threads=1)
        table = pd.read_csv(os.path.join(root, "runs", "ablation.csv")).set_index("configuration")
        self.assertLess(table.loc["cb", "mean_err_cm"], table.loc["ntc", "mean_err_cm"])
        self.assertLessEqual(table.loc["cb+ta", "mean_err_cm"], table.loc["cb", "mean_err_cm"])
