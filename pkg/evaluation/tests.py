import dataclasses
import json
import math
import os
import tempfile
from unittest import skipUnless

import numpy as np
import pandas as pd
from django.conf import settings
from django.test import SimpleTestCase, tag

from dataset.generator import GeneratorConfig, generate_dataset, generate_piece
from dataset.types import Dataset
from network.config import ModelConfig
from network.services import AudioConditionedUNet
from tensorcore.exceptions import ContractViolation
from training.services import TrainConfig, train

from .choices import EvalMode
from .metrics import PixelCounts, alignment_error_cm, onset_error_table, onset_errors, pixel_metrics
from .services import PieceResult, aggregate, evaluate, n_frames, write_onsets, write_report

THRESHOLDS = [0.05, 0.1, 0.5, 1.0, 5.0]


def block(shape, rows, cols):
    mask = np.zeros(shape)
    mask[rows, cols] = 1.0
    return mask


class PixelMetricTests(SimpleTestCase):
    def test_identical_masks(self):
        gt = block((16, 16), slice(2, 6), slice(3, 9))
        self.assertEqual(pixel_metrics(gt, gt), (1.0, 1.0, 1.0))

    def test_prediction_twice_the_target(self):
        gt = block((16, 16), slice(0, 4), slice(0, 4))
        pred = gt + block((16, 16), slice(8, 12), slice(8, 12))
        precision, recall, f1 = pixel_metrics(pred, gt)
        self.assertEqual(precision, 0.5)
        self.assertEqual(recall, 1.0)
        self.assertAlmostEqual(f1, 2 / 3)

    def test_empty_prediction_scores_zero(self):
        gt = block((16, 16), slice(0, 4), slice(0, 4))
        self.assertEqual(pixel_metrics(np.zeros((16, 16)), gt), (0.0, 0.0, 0.0))

    def test_counts_are_micro_averaged(self):
        total = PixelCounts(3, 1, 0) + PixelCounts(1, 3, 4)
        self.assertEqual(total, PixelCounts(4, 4, 4))
        self.assertEqual(total.scores(), (0.5, 0.5, 0.5))

    def test_shape_mismatch(self):
        with self.assertRaises(ContractViolation):
            pixel_metrics(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_matches_brute_force_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            pred = rng.random((16, 16))
            gt = rng.random((16, 16)) < 0.3
            tp = fp = fn = 0
            for r in range(16):
                for c in range(16):
                    hit = pred[r, c] >= 0.5
                    tp += hit and gt[r, c]
                    fp += hit and not gt[r, c]
                    fn += (not hit) and gt[r, c]
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            got = pixel_metrics(pred, gt)
            for actual, expected in zip(got, (precision, recall, f1)):
                self.assertAlmostEqual(actual, expected, delta=1e-9)


class AlignmentErrorTests(SimpleTestCase):
    def test_identical_masks_have_no_error(self):
        gt = block((32, 32), slice(4, 10), slice(6, 16))
        self.assertEqual(alignment_error_cm(gt, gt), 0.0)

    def test_full_resolution_pixels_to_cm(self):
        gt = block((8, 128), slice(2, 4), slice(0, 2))
        pred = block((8, 128), slice(2, 4), slice(100, 102))
        self.assertAlmostEqual(alignment_error_cm(pred, gt, downscale=1), 3.52, places=9)

    def test_model_pixels_are_scaled_to_the_full_page(self):
        gt = block((8, 64), slice(2, 4), slice(0, 2))
        pred = block((8, 64), slice(2, 4), slice(10, 12))
        self.assertAlmostEqual(alignment_error_cm(pred, gt), 1.056, places=9)

    def test_empty_prediction_has_no_error(self):
        gt = block((8, 8), slice(0, 2), slice(0, 2))
        self.assertIsNone(alignment_error_cm(np.zeros((8, 8)), gt))

    def test_empty_ground_truth(self):
        with self.assertRaises(ContractViolation):
            alignment_error_cm(np.ones((8, 8)), np.zeros((8, 8)))

    def test_brute_force_center_of_mass(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            pred = rng.random((16, 16))
            gt = rng.random((16, 16)) < 0.2
            gt[0, 0] = True
            if not np.any(pred >= 0.5):
                continue
            sums = [0.0, 0.0, 0.0]
            for r in range(16):
                for c in range(16):
                    if pred[r, c] >= 0.5:
                        sums[0] += pred[r, c] * c
                        sums[1] += pred[r, c] * r
                        sums[2] += pred[r, c]
            rows, cols = np.nonzero(gt)
            dx, dy = sums[0] / sums[2] - cols.mean(), sums[1] / sums[2] - rows.mean()
            expected = math.hypot(dx, dy) * 3 * 0.0352
            self.assertAlmostEqual(alignment_error_cm(pred, gt), expected, delta=1e-9)


class OnsetTableTests(SimpleTestCase):
    def test_cumulative_fractions(self):
        table = onset_error_table([1.03, 2.2, 7.0], [1.0, 2.0, 3.0], THRESHOLDS)
        self.assertEqual(list(table), THRESHOLDS)
        for got, expected in zip(table.values(), [1 / 3, 1 / 3, 2 / 3, 2 / 3, 1.0]):
            self.assertAlmostEqual(got, expected)

    def test_unpredicted_onsets_never_count(self):
        np.testing.assert_array_equal(onset_errors([None, float("nan"), 1.5], [1.0, 1.0, 1.0]), [np.inf, np.inf, 0.5])
        table = onset_error_table([None, 1.0], [1.0, 1.0], [1e9])
        self.assertEqual(table[1e9], 0.5)

    def test_table_never_decreases(self):
        rng = np.random.default_rng(2)
        true = rng.uniform(0, 30, 200)
        predicted = true + rng.standard_normal(200) * 2
        values = list(onset_error_table(predicted, true, THRESHOLDS).values())
        self.assertEqual(values, sorted(values))

    def test_no_onsets(self):
        self.assertEqual(onset_error_table([], [], [0.1]), {0.1: 0.0})


class AggregationTests(SimpleTestCase):
    def results(self):
        first = PieceResult("a", PixelCounts(2, 2, 0), errors_cm=[1.0, 1.0, 1.0], frames=4, unpredicted_frames=1)
        second = PieceResult("b", PixelCounts(2, 0, 2), errors_cm=[3.0], frames=2)
        first.onset_times, first.predicted_times = [1.0], [1.02]
        second.onset_times, second.predicted_times = [2.0], [None]
        return [first, second]

    def test_frame_aggregation_pools_frames(self):
        report = aggregate(self.results(), thresholds=THRESHOLDS)
        self.assertEqual(report.aggregation, "frame")
        self.assertEqual((report.precision, report.recall), (4 / 6, 4 / 6))
        self.assertEqual(report.mean_err_cm, 1.5)
        self.assertEqual(report.median_err_cm, 1.0)
        self.assertEqual(report.frames, 6)
        self.assertEqual(report.predicted_frames + report.unpredicted_frames, report.frames)
        self.assertEqual((report.onsets, report.predicted_onsets), (2, 1))
        self.assertEqual(report.onset_table[0.05], 0.5)

    def test_piece_aggregation_averages_pieces(self):
        report = aggregate(self.results(), per_piece=True)
        self.assertEqual(report.aggregation, "piece")
        self.assertEqual(report.mean_err_cm, 2.0)
        self.assertEqual([s["piece"] for s in report.per_piece], ["a", "b"])

    def test_mode_selects_measures(self):
        report = aggregate(self.results(), EvalMode.PIXEL)
        self.assertIsNotNone(report.f1)
        self.assertIsNone(report.mean_err_cm)
        self.assertEqual(report.onset_table, {})
        self.assertTrue(EvalMode.ALL.includes(EvalMode.TEMPORAL))
        self.assertFalse(EvalMode.GEOMETRIC.includes(EvalMode.PIXEL))


class EvaluateTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        config = GeneratorConfig(staves=2, notes_per_staff=8)
        cls.pieces = generate_dataset(2, seed=3, config=config).pieces

    def test_oracle_is_perfect(self):
        report, rows = evaluate(None, self.pieces, oracle=True)
        self.assertEqual((report.precision, report.recall, report.f1), (1.0, 1.0, 1.0))
        self.assertEqual(report.mean_err_cm, 0.0)
        self.assertEqual(report.median_err_cm, 0.0)
        self.assertEqual(list(report.onset_table.values()), [1.0] * len(THRESHOLDS))
        self.assertEqual(report.frames, sum(n_frames(p) for p in self.pieces))
        self.assertEqual(report.unpredicted_frames, 0)
        self.assertEqual(len(rows), sum(len(p.track) for p in self.pieces))
        self.assertLess(max(row["abs_error"] for row in rows), 1e-6)

    def test_oracle_per_piece(self):
        report, _ = evaluate(None, self.pieces, EvalMode.GEOMETRIC, oracle=True, per_piece=True)
        self.assertEqual(len(report.per_piece), 2)
        self.assertEqual(report.mean_err_cm, 0.0)
        self.assertIsNone(report.f1)

    def test_untrained_model(self):
        config = GeneratorConfig(height=64, width=96, staves=1, notes_per_staff=4, notes_per_bar=4)
        piece = generate_piece(5, config, "small")
        model = AudioConditionedUNet.initialize(ModelConfig.tiny(), seed=0)
        report, rows = evaluate(model, [piece])
        self.assertEqual(report.frames, n_frames(piece))
        self.assertEqual(report.predicted_frames + report.unpredicted_frames, report.frames)
        for value in (report.precision, report.recall, report.f1):
            self.assertTrue(0.0 <= value <= 1.0)
        values = list(report.onset_table.values())
        self.assertEqual(values, sorted(values))
        self.assertEqual(len(rows), len(piece.track))

    def test_requires_a_model_or_the_oracle(self):
        with self.assertRaises(ContractViolation):
            evaluate(None, self.pieces)
        with self.assertRaises(ContractViolation):
            evaluate(None, [], oracle=True)

    def test_written_outputs(self):
        report, rows = evaluate(None, self.pieces[:1], oracle=True)
        rows[0]["predicted_time"], rows[0]["abs_error"] = None, float("inf")
        report.onset_table[0.05] = 0.5
        with tempfile.TemporaryDirectory() as tmp:
            write_report(report, os.path.join(tmp, "metrics.json"))
            write_onsets(rows, os.path.join(tmp, "onsets.csv"))
            with open(os.path.join(tmp, "metrics.json"), encoding="utf-8") as f:
                saved = json.load(f)
            onsets = pd.read_csv(os.path.join(tmp, "onsets.csv"))
        self.assertEqual(saved["onset_table"]["0.05"], 0.5)
        self.assertEqual(saved["onset_table"]["5"], 1.0)
        self.assertEqual(saved["f1"], 1.0)
        self.assertEqual(list(onsets.columns), ["piece", "onset_time", "predicted_time", "abs_error"])
        self.assertEqual(len(onsets), len(rows))
        self.assertTrue(math.isnan(onsets["predicted_time"][0]))


def overfit_dataset(n_pieces=4, seed=5):
    """Four default-size pieces, validated on copies of themselves."""
    pieces = generate_dataset(n_pieces, seed=seed, config=GeneratorConfig(), val_fraction=0.0).pieces
    copies = [dataclasses.replace(piece, id=f"{piece.id}-val") for piece in pieces]
    return Dataset(pieces + copies, {"train": [p.id for p in pieces], "val": [p.id for p in copies]})


@tag("slow")
@skipUnless(settings.PAGETRACK["RUN_SLOW_TESTS"], "set PGTK_SLOW_TESTS=1")
class OverfitAcceptanceTests(SimpleTestCase):
    def test_context_model_fits_its_training_pieces(self):
        dataset = overfit_dataset()
        f1_scores, errors = [], []
        for seed in range(3):
            result = train(dataset, ModelConfig(encoder_kind="cb"), TrainConfig(
                seed=seed, max_epochs=200, lr=1e-3, shift_aug_max=0, stop_patience=20, windows_per_piece=0,
            ))
            report, _ = evaluate(result.model, dataset.split("train"), EvalMode.ALL, threshold=0.5)
            f1_scores.append(report.f1)
            errors.append(math.inf if report.median_err_cm is None else report.median_err_cm)
        self.assertGreaterEqual(float(np.median(f1_scores)), 0.90)
        self.assertLessEqual(float(np.median(errors)), 0.5)
