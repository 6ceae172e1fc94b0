import dataclasses
import math
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, tag

from dataset.generator import GeneratorConfig, generate_dataset
from dataset.positions import frame_targets
from dataset.types import AlignmentTrack, Dataset, Event, ScorePage, Staff
from network.config import ModelConfig
from network.services import AudioConditionedUNet
from tensorcore.exceptions import ContractViolation
from training.services import TrainConfig, train

from .services import (
    ScoreTracker, center_of_mass, map_to_time, nearest_staff, score_time, standardized_frames, tracker_init,
    tracker_step,
)


def two_staff_page():
    staves = [
        Staff(y_center=20.0, y_top=16.0, y_bottom=24.0, x_start=10.0, x_end=90.0),
        Staff(y_center=40.0, y_top=36.0, y_bottom=44.0, x_start=10.0, x_end=90.0),
    ]
    return ScorePage(np.full((64, 96), 255, dtype=np.uint8), staves)


def tiny_model(seed=0, **overrides):
    model = AudioConditionedUNet.initialize(ModelConfig.tiny(**overrides), seed=seed)
    rng = np.random.default_rng(seed + 1)
    params = model.params.replace({
        name: rng.standard_normal(t.shape) * 0.3 for name, t in model.params.items() if ".film." in name
    })
    return AudioConditionedUNet(params, model.config, model.stats)


def with_output_bias(model, bias):
    return AudioConditionedUNet(model.params.replace({"unet.out.bias": np.array([bias])}), model.config, model.stats)


class CenterOfMassTests(SimpleTestCase):
    def test_single_pixel(self):
        mask = np.zeros((16, 16))
        mask[7, 5] = 0.9
        self.assertEqual(center_of_mass(mask), (5.0, 7.0))

    def test_symmetric_pair(self):
        mask = np.zeros((16, 16))
        mask[0, 0] = mask[0, 10] = 1.0
        self.assertEqual(center_of_mass(mask), (5.0, 0.0))

    def test_empty_mask_is_invalid(self):
        self.assertIsNone(center_of_mass(np.zeros((16, 16))))
        self.assertIsNone(center_of_mass(np.full((16, 16), 0.49)))

    def test_weighted_and_unweighted(self):
        mask = np.zeros((4, 16))
        mask[0, 0] = 0.6
        mask[0, 10] = 1.0
        self.assertAlmostEqual(center_of_mass(mask)[0], 6.25)
        self.assertAlmostEqual(center_of_mass(mask, weighted=False)[0], 5.0)

    def test_channel_axis(self):
        mask = np.zeros((1, 8, 8))
        mask[0, 3, 4] = 1.0
        self.assertEqual(center_of_mass(mask), (4.0, 3.0))

    def test_raising_threshold_never_adds_pixels(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = rng.random((16, 16))
            low, high = sorted(rng.random(2))
            self.assertTrue(np.all((mask >= high) <= (mask >= low)))


class MapToTimeTests(SimpleTestCase):
    def setUp(self):
        self.page = two_staff_page()
        self.track = AlignmentTrack([
            Event(1.0, 30.0, 20.0, 0), Event(2.0, 70.0, 20.0, 0), Event(3.0, 20.0, 40.0, 1),
        ])

    def test_onset_knots(self):
        self.assertAlmostEqual(map_to_time((30.0, 20.0), self.page, self.track), 1.0)
        self.assertAlmostEqual(map_to_time((20.0, 40.0), self.page, self.track), 3.0)

    def test_midway_between_onsets(self):
        self.assertAlmostEqual(map_to_time((50.0, 21.0), self.page, self.track), 1.5)

    def test_across_the_staff_break(self):
        # unrolled: 70 -> 60 on staff 0, 20 on staff 1 -> 90; end of staff 0 is 80
        self.assertAlmostEqual(map_to_time((90.0, 20.0), self.page, self.track), 2.0 + 20.0 / 30.0)

    def test_clamped_outside_the_alignment(self):
        self.assertAlmostEqual(map_to_time((10.0, 20.0), self.page, self.track), 1.0)
        self.assertAlmostEqual(map_to_time((90.0, 40.0), self.page, self.track), 3.0)

    def test_equidistant_y_picks_the_upper_staff(self):
        self.assertEqual(nearest_staff(30.0, self.page.staves), 0)
        self.assertEqual(nearest_staff(30.1, self.page.staves), 1)

    def test_invalid_position(self):
        with self.assertRaises(ContractViolation):
            map_to_time(None, self.page, self.track)

    def test_mask_center_maps_back_to_the_onset(self):
        # columns 25..34 around x=30 have their center at 29.5
        self.assertAlmostEqual(score_time((29.5, 19.5), self.page, self.track), 1.0)
        with self.assertRaises(ContractViolation):
            score_time(None, self.page, self.track)


class TrackerTests(SimpleTestCase):
    def setUp(self):
        self.model = tiny_model()
        self.page = two_staff_page()
        self.frames = np.random.default_rng(3).standard_normal((12, 78)).astype(np.float32)

    def test_init_is_zeroed_and_repeatable(self):
        a, b = tracker_init(self.model, self.page), tracker_init(self.model, self.page)
        self.assertEqual(a.ring.shape, (8, 78))
        self.assertFalse(a.ring.any())
        self.assertFalse(a.recurrent.h.data.any())
        self.assertFalse(a.recurrent.c.data.any())
        np.testing.assert_array_equal(a.page.tensor.data, b.page.tensor.data)
        self.assertEqual(a.step, 0)

    def test_frame_based_buffer_holds_one_frame(self):
        model = tiny_model(encoder_kind="fb")
        self.assertEqual(tracker_init(model, self.page).ring.shape, (1, 78))

    def test_small_page_is_rejected(self):
        with self.assertRaises(ContractViolation):
            tracker_init(self.model, np.zeros((12, 40)))

    def test_step_count_and_mask_range(self):
        tracker = ScoreTracker(self.model, self.page)
        prediction = tracker.step(self.frames[0])
        self.assertEqual(tracker.steps, 1)
        self.assertEqual(prediction.mask.shape, (64, 96))
        self.assertTrue(np.all((prediction.mask > 0) & (prediction.mask < 1)))
        self.assertGreaterEqual(prediction.step_latency, 0.0)

    def test_streaming_matches_batch_evaluation(self):
        predictions = ScoreTracker(self.model, self.page).run(self.frames)
        batch = self.model.predict_sequence(self.page.ink(), self.frames)
        for t, prediction in enumerate(predictions):
            np.testing.assert_array_equal(prediction.mask, batch[t])

    def test_future_frames_do_not_change_the_past(self):
        changed = 0
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            frames = rng.standard_normal((12, 78)).astype(np.float32)
            cut = int(rng.integers(1, 12))
            other = frames.copy()
            other[cut:] = rng.standard_normal((12 - cut, 78))
            first = ScoreTracker(self.model, self.page).run(frames)
            second = ScoreTracker(self.model, self.page).run(other)
            for t in range(cut):
                np.testing.assert_array_equal(first[t].mask, second[t].mask)
            changed += not np.array_equal(first[-1].mask, second[-1].mask)
        self.assertGreater(changed, 0)

    def test_wrong_frame_size(self):
        with self.assertRaises(ContractViolation):
            ScoreTracker(self.model, self.page).step(np.zeros(40))

    def test_stride_reuses_masks(self):
        tracker = ScoreTracker(self.model, self.page, stride=3)
        predictions = tracker.run(self.frames[:6])
        self.assertEqual([p.reused for p in predictions], [False, True, True, False, True, True])
        np.testing.assert_array_equal(predictions[1].mask, predictions[0].mask)
        full = ScoreTracker(self.model, self.page).run(self.frames[:6])
        np.testing.assert_array_equal(predictions[3].mask, full[3].mask)

    def test_invalid_steps_hold_the_last_position(self):
        bright, dark = with_output_bias(self.model, 50.0), with_output_bias(self.model, -50.0)
        state = tracker_init(bright, self.page)
        valid, state = tracker_step(bright, state, self.frames[0])
        self.assertTrue(valid.valid)
        self.assertAlmostEqual(valid.position[0], 47.5, places=3)
        held, state = tracker_step(dark, state, self.frames[1])
        self.assertFalse(held.valid)
        self.assertEqual(held.position, valid.position)

    def test_never_valid_has_no_position(self):
        prediction = ScoreTracker(with_output_bias(self.model, -50.0), self.page).step(self.frames[0])
        self.assertFalse(prediction.valid)
        self.assertIsNone(prediction.position)


@tag("slow")
@skipUnless(settings.PAGETRACK["RUN_SLOW_TESTS"], "set PGTK_SLOW_TESTS=1")
class TrackingAccuracyTests(SimpleTestCase):
    def test_overfit_model_tracks_within_ten_pixels(self):
        pieces = generate_dataset(4, seed=5, config=GeneratorConfig(), val_fraction=0.0).pieces
        copies = [dataclasses.replace(piece, id=f"{piece.id}-val") for piece in pieces]
        dataset = Dataset(pieces + copies, {"train": [p.id for p in pieces], "val": [p.id for p in copies]})
        model = train(dataset, ModelConfig(encoder_kind="cb"), TrainConfig(
            seed=0, max_epochs=200, lr=1e-3, shift_aug_max=0, stop_patience=20, windows_per_piece=0,
        )).model
        close = total = 0
        for piece in pieces:
            page, track = piece.model_view
            frames = standardized_frames(model, piece)
            targets = frame_targets(page, track, len(frames), settings.PAGETRACK["FPS"])
            for prediction, target in zip(ScoreTracker(model, page).run(frames), targets):
                goal = center_of_mass(target)
                if goal is None:
                    continue
                total += 1
                if prediction.position is not None:
                    close += math.dist(prediction.position, goal) <= 10.0
        self.assertGreater(total, 0)
        self.assertGreaterEqual(close / total, 0.9)
