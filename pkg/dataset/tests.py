import json
import os
import tempfile
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from dsp.processing import AudioSignal, Spectrogram
from tensorcore.exceptions import ContractViolation

from .augmentation import augment_reverb, augment_shift, augment_tempo, resample_frames
from .exceptions import DatasetValidationError, GenerationError
from .generator import GeneratorConfig, generate_dataset, generate_piece, plan_layout, split_ids
from .positions import frame_targets, interpolate_position, render_target_mask
from .storage import load_dataset, load_piece, save_dataset, save_piece
from .synthesis import pitch_to_hz, staff_step_to_pitch, synthesize
from .types import AlignmentTrack, Dataset, Event, Position, ScorePage, Staff


def small_config(**kwargs):
    return GeneratorConfig(staves=2, notes_per_staff=8, **kwargs)


def two_staff_page(height=100, width=200):
    staves = [
        Staff(y_center=30.0, y_top=22.0, y_bottom=38.0, x_start=10.0, x_end=190.0),
        Staff(y_center=70.0, y_top=62.0, y_bottom=78.0, x_start=10.0, x_end=190.0),
    ]
    return ScorePage(np.full((height, width), 255, dtype=np.uint8), staves)


class InterpolationTests(SimpleTestCase):
    def setUp(self):
        self.page = two_staff_page()

    def test_position_at_onset_is_the_event(self):
        track = AlignmentTrack([Event(1.0, 50.0, 30.0, 0), Event(2.0, 90.0, 30.0, 0)])
        self.assertEqual(interpolate_position(track, 1.0, self.page.staves), Position(50.0, 30.0, 0))
        self.assertEqual(interpolate_position(track, 2.0, self.page.staves), Position(90.0, 30.0, 0))

    def test_linear_between_events_on_one_staff(self):
        track = AlignmentTrack([Event(0.0, 100.0, 30.0, 0), Event(1.0, 140.0, 30.0, 0)])
        position = interpolate_position(track, 0.5, self.page.staves)
        self.assertAlmostEqual(position.x, 120.0)
        self.assertEqual(position.y, 30.0)

    def test_clamped_outside_the_aligned_range(self):
        track = AlignmentTrack([Event(1.0, 50.0, 30.0, 0), Event(2.0, 90.0, 30.0, 0)])
        self.assertEqual(interpolate_position(track, 0.0, self.page.staves).x, 50.0)
        self.assertEqual(interpolate_position(track, 9.0, self.page.staves).x, 90.0)

    def test_single_event_is_constant(self):
        track = AlignmentTrack([Event(1.0, 42.0, 70.0, 1)])
        for t in (0.0, 1.0, 5.0):
            self.assertEqual(interpolate_position(track, t, self.page.staves), Position(42.0, 70.0, 1))

    def test_empty_track_raises(self):
        with self.assertRaises(ContractViolation):
            interpolate_position(AlignmentTrack([]), 0.0, self.page.staves)

    def test_staff_changes_at_midpoint_of_onsets(self):
        track = AlignmentTrack([Event(1.0, 150.0, 30.0, 0), Event(2.0, 20.0, 70.0, 1)])
        before = interpolate_position(track, 1.25, self.page.staves)
        self.assertEqual(before.staff, 0)
        self.assertAlmostEqual(before.x, 162.5)
        self.assertEqual(interpolate_position(track, 1.49, self.page.staves).staff, 0)
        after = interpolate_position(track, 1.51, self.page.staves)
        self.assertEqual(after.staff, 1)
        self.assertEqual(after.y, 70.0)
        self.assertGreaterEqual(after.x, 10.0)

    def test_tempo_scaling_commutes_with_interpolation(self):
        track = AlignmentTrack([
            Event(0.5, 20.0, 30.0, 0), Event(1.1, 80.0, 30.0, 0),
            Event(1.9, 170.0, 30.0, 0), Event(2.4, 30.0, 70.0, 1),
        ])
        fast = track.time_scaled(2.0)
        for t in np.linspace(0.0, 3.0, 31):
            expected = interpolate_position(track, t, self.page.staves)
            actual = interpolate_position(fast, t / 2.0, self.page.staves)
            self.assertEqual(actual.staff, expected.staff)
            self.assertAlmostEqual(actual.x, expected.x)


class TargetMaskTests(SimpleTestCase):
    def setUp(self):
        self.page = two_staff_page()

    def test_default_width_around_center(self):
        target = render_target_mask(self.page, Position(100.0, 30.0, 0))
        cols = np.flatnonzero(target.mask.any(axis=0))
        rows = np.flatnonzero(target.mask.any(axis=1))
        self.assertEqual((cols[0], cols[-1]), (95, 104))
        self.assertEqual((rows[0], rows[-1]), (18, 41))
        self.assertFalse(target.clipped)

    def test_area_is_width_times_staff_height_plus_margins(self):
        staff = self.page.staves[1]
        target = render_target_mask(self.page, Position(60.0, 70.0, 1))
        self.assertEqual(target.area, 10 * int(staff.height + 2 * staff.space))

    def test_clipped_at_left_border(self):
        target = render_target_mask(self.page, Position(3.0, 30.0, 0))
        cols = np.flatnonzero(target.mask.any(axis=0))
        self.assertEqual((cols[0], cols[-1]), (0, 7))
        self.assertTrue(target.clipped)

    def test_every_frame_has_a_target(self):
        piece = generate_piece(3, small_config())
        page, track = piece.model_view
        n_frames = int(piece.duration * 20) + 1
        masks = frame_targets(page, track, n_frames, fps=20)
        self.assertEqual(masks.shape, (n_frames, page.height, page.width))
        self.assertTrue(masks.any(axis=(1, 2)).all())


class SynthesisTests(SimpleTestCase):
    def test_staff_steps_follow_the_treble_clef(self):
        self.assertEqual(staff_step_to_pitch(0), 64)
        self.assertEqual(staff_step_to_pitch(2), 67)
        self.assertEqual(staff_step_to_pitch(7), 76)
        self.assertEqual(staff_step_to_pitch(-2), 60)

    def test_a4_is_440(self):
        self.assertAlmostEqual(pitch_to_hz(69), 440.0)

    def test_peak_and_pcm_grid(self):
        events = [Event(0.1, 0.0, 0.0, 0, pitch=69, duration=0.5), Event(0.4, 0.0, 0.0, 0, pitch=72, duration=0.5)]
        audio = synthesize(events, 1.0, 22050)
        self.assertEqual(len(audio.samples), 22050)
        self.assertAlmostEqual(float(np.abs(audio.samples).max()), 0.8, places=4)
        scaled = audio.samples.astype(np.float64) * 32768.0
        np.testing.assert_array_equal(scaled, np.round(scaled))
        self.assertEqual(float(np.abs(audio.samples[:2205]).max()), 0.0)


class GeneratorTests(SimpleTestCase):
    def test_same_seed_same_piece(self):
        a, b = generate_piece(11, small_config()), generate_piece(11, small_config())
        np.testing.assert_array_equal(a.page.image, b.page.image)
        np.testing.assert_array_equal(a.audio.samples, b.audio.samples)
        self.assertEqual(a.track.events, b.track.events)

    def test_different_seeds_differ(self):
        a, b = generate_piece(1, small_config()), generate_piece(2, small_config())
        self.assertNotEqual([e.pitch for e in a.track], [e.pitch for e in b.track])

    def test_page_size_and_note_count(self):
        piece = generate_piece(5, small_config())
        self.assertEqual(piece.page.image.shape, (576, 768))
        self.assertEqual(len(piece.track), 16)
        page, _ = piece.model_view
        self.assertEqual(page.image.shape, (192, 256))

    def test_noteheads_lie_within_their_staff(self):
        piece = generate_piece(7, small_config())
        staves = piece.page.staves
        for event in piece.track:
            staff = staves[event.staff]
            self.assertTrue(staff.x_start <= event.x <= staff.x_end)
            self.assertEqual(event.y, staff.y_center)
        self.assertTrue(np.all(np.diff(piece.track.onsets) > 0))
        self.assertLess(piece.track.onsets[-1], piece.duration)

    def test_onsets_fall_on_the_frame_grid(self):
        onsets = generate_piece(8, small_config()).track.onsets
        np.testing.assert_allclose(onsets * 20, np.round(onsets * 20), atol=1e-6)

    def test_duplicated_bars_are_pixel_identical_at_model_resolution(self):
        piece = generate_piece(21, small_config(ambiguity=True))
        self.assertTrue(piece.ambiguous)
        page, _ = piece.model_view
        factor = piece.page.downscale
        crops = []
        for x0, y0, x1, y1 in piece.duplicates:
            crops.append(page.image[y0 // factor: y1 // factor, x0 // factor: x1 // factor])
        self.assertEqual(crops[0].shape, crops[1].shape)
        np.testing.assert_array_equal(crops[0], crops[1])
        self.assertTrue((crops[0] < 255).any())

    def test_features_only_pieces_carry_frames(self):
        piece = generate_piece(4, small_config(features_only=True))
        self.assertIsNone(piece.audio)
        self.assertEqual(piece.features.frames.shape[1], 78)
        self.assertFalse(piece.features.standardized)

    def test_layout_that_does_not_fit_raises(self):
        with self.assertRaises(GenerationError):
            plan_layout(GeneratorConfig(notes_per_staff=64, notes_per_bar=4))
        with self.assertRaises(GenerationError):
            plan_layout(GeneratorConfig(staves=8))

    def test_dataset_seeds_and_splits(self):
        dataset = generate_dataset(4, seed=9, config=small_config())
        self.assertEqual([p.id for p in dataset], ["piece000", "piece001", "piece002", "piece003"])
        self.assertEqual(dataset.splits["val"], ["piece003"])
        self.assertEqual(len(set(p.seed for p in dataset)), 4)
        again = generate_dataset(4, seed=9, config=small_config())
        self.assertEqual([p.seed for p in dataset], [p.seed for p in again])

    def test_split_ids(self):
        ids = [f"p{i}" for i in range(8)]
        splits = split_ids(ids, 0.25, 0.125)
        self.assertEqual(splits["train"], ids[:5])
        self.assertEqual(splits["val"], ids[5:7])
        self.assertEqual(splits["test"], ids[7:])


class AugmentationTests(SimpleTestCase):
    def setUp(self):
        self.page = two_staff_page()
        self.mask = render_target_mask(self.page, Position(100.0, 30.0, 0)).mask

    def center(self, mask):
        rows, cols = np.nonzero(mask)
        return rows.mean(), cols.mean()

    def test_zero_shift_is_identity(self):
        ink = np.random.default_rng(0).random((100, 200))
        page, masks = augment_shift(ink, self.mask, 0, 0)
        np.testing.assert_array_equal(page, ink)
        np.testing.assert_array_equal(masks, self.mask)

    def test_shift_moves_the_target(self):
        _, moved = augment_shift(np.zeros((100, 200)), self.mask, 3, -2)
        row, col = self.center(self.mask)
        new_row, new_col = self.center(moved)
        self.assertAlmostEqual(new_row, row - 2)
        self.assertAlmostEqual(new_col, col + 3)

    def test_shift_of_a_mask_stack(self):
        stack = np.stack([self.mask, self.mask])
        _, moved = augment_shift(np.zeros((100, 200)), stack, -4, 1)
        self.assertEqual(moved.shape, stack.shape)
        np.testing.assert_array_equal(moved[0], moved[1])

    def test_shift_back_restores_the_interior(self):
        ink = np.random.default_rng(1).random((100, 200))
        shifted, _ = augment_shift(ink, self.mask, 5, 3)
        restored, _ = augment_shift(shifted, self.mask, -5, -3)
        np.testing.assert_array_equal(restored[3:97, 5:195], ink[3:97, 5:195])

    def test_tempo_factor_one_is_identity(self):
        piece = generate_piece(2, small_config())
        self.assertIs(augment_tempo(piece, 1.0), piece)

    def test_double_tempo_halves_onsets(self):
        piece = generate_piece(2, small_config())
        fast = augment_tempo(piece, 2.0)
        np.testing.assert_allclose(fast.track.onsets, piece.track.onsets / 2.0)
        self.assertTrue(np.all(np.diff(fast.track.onsets) > 0))
        self.assertAlmostEqual(fast.duration, piece.duration / 2.0, delta=0.01)
        np.testing.assert_array_equal(fast.page.image, piece.page.image)

    def test_feature_only_tempo_recomputes_frames(self):
        piece = generate_piece(2, small_config(features_only=True))
        slow = augment_tempo(piece, 0.5)
        self.assertIsNone(slow.audio)
        self.assertAlmostEqual(len(slow.features), 2 * (len(piece.features) - 1) + 1, delta=2)

    def test_tempo_factor_must_be_positive(self):
        piece = generate_piece(2, small_config())
        for factor in (0.0, -1.0):
            with self.assertRaises(ContractViolation):
                augment_tempo(piece, factor)

    def test_resample_frames_is_linear(self):
        frames = np.arange(11, dtype=np.float32)[:, None] * np.ones((1, 3), dtype=np.float32)
        fast = resample_frames(Spectrogram(frames, 10), 2.0)
        self.assertEqual(len(fast), 6)
        np.testing.assert_allclose(fast.frames[:, 0], [0, 2, 4, 6, 8, 10])

    def test_resample_without_note_list(self):
        piece = generate_piece(6, small_config())
        bare = replace(piece, track=AlignmentTrack([replace(e, pitch=None, duration=None) for e in piece.track]))
        fast = augment_tempo(bare, 1.25)
        self.assertIsNone(fast.audio)
        np.testing.assert_allclose(fast.track.onsets, piece.track.onsets / 1.25)

    def test_reverb_keeps_length_and_peak(self):
        audio = AudioSignal(np.sin(np.linspace(0, 200, 22050)) * 0.5, 22050)
        wet = augment_reverb(audio, 0.3, np.random.default_rng(0))
        self.assertEqual(len(wet.samples), len(audio.samples))
        self.assertAlmostEqual(float(np.abs(wet.samples).max()), float(np.abs(audio.samples).max()), places=3)
        self.assertFalse(np.array_equal(wet.samples, audio.samples))


class StorageTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def piece_dir(self, name="p"):
        return os.path.join(self.tmp.name, name)

    def rewrite(self, path, change):
        with open(path) as f:
            data = json.load(f)
        change(data)
        with open(path, "w") as f:
            json.dump(data, f)

    def test_round_trip_with_audio(self):
        piece = generate_piece(8, small_config(ambiguity=True))
        save_piece(piece, self.piece_dir())
        loaded = load_piece(self.piece_dir())
        np.testing.assert_array_equal(loaded.page.image, piece.page.image)
        self.assertEqual(loaded.page.staves, piece.page.staves)
        self.assertEqual(loaded.track.events, piece.track.events)
        np.testing.assert_array_equal(loaded.audio.samples, piece.audio.samples)
        self.assertEqual(loaded.duplicates, piece.duplicates)
        self.assertEqual(loaded.seed, 8)

    def test_round_trip_with_features(self):
        piece = generate_piece(8, small_config(features_only=True))
        save_piece(piece, self.piece_dir())
        loaded = load_piece(self.piece_dir())
        self.assertIsNone(loaded.audio)
        np.testing.assert_array_equal(loaded.features.frames, piece.features.frames)

    def test_saving_is_byte_deterministic(self):
        dataset = generate_dataset(2, seed=3, config=small_config())
        first, second = self.piece_dir("a"), self.piece_dir("b")
        save_dataset(dataset, first)
        save_dataset(dataset, second)
        for root, _, files in os.walk(first):
            for name in files:
                path = os.path.join(root, name)
                with open(path, "rb") as a, open(path.replace(first, second, 1), "rb") as b:
                    self.assertEqual(a.read(), b.read(), path)

    def test_dataset_round_trip_keeps_splits(self):
        dataset = generate_dataset(4, seed=3, config=small_config())
        save_dataset(dataset, self.tmp.name)
        loaded = load_dataset(self.tmp.name)
        self.assertEqual(loaded.splits, dataset.splits)
        self.assertEqual([p.id for p in loaded.split("val")], ["piece003"])

    def test_rejects_x_moving_left_within_a_staff(self):
        save_piece(generate_piece(8, small_config()), self.piece_dir())

        def swap(data):
            events = data["events"]
            events[0]["x"], events[1]["x"] = events[1]["x"], events[0]["x"]

        self.rewrite(os.path.join(self.piece_dir(), "align.json"), swap)
        with self.assertRaisesMessage(DatasetValidationError, "x_nondecreasing"):
            load_piece(self.piece_dir())

    def test_rejects_unsorted_onsets(self):
        save_piece(generate_piece(8, small_config()), self.piece_dir())

        def swap(data):
            events = data["events"]
            events[2]["onset"], events[3]["onset"] = events[3]["onset"], events[2]["onset"]

        self.rewrite(os.path.join(self.piece_dir(), "align.json"), swap)
        with self.assertRaisesMessage(DatasetValidationError, "onsets_sorted"):
            load_piece(self.piece_dir())

    def test_rejects_piece_without_audio_or_features(self):
        save_piece(generate_piece(8, small_config()), self.piece_dir())
        os.remove(os.path.join(self.piece_dir(), "audio.wav"))
        with self.assertRaisesMessage(DatasetValidationError, "audio_or_features"):
            load_piece(self.piece_dir())

    def test_rejects_staff_outside_the_page(self):
        save_piece(generate_piece(8, small_config()), self.piece_dir())

        def widen(data):
            data["staves"][0]["x_end"] = data["width"] + 10

        self.rewrite(os.path.join(self.piece_dir(), "meta.json"), widen)
        with self.assertRaisesMessage(DatasetValidationError, "staff_on_page"):
            load_piece(self.piece_dir())

    def test_every_invalid_piece_is_reported(self):
        dataset = generate_dataset(3, seed=4, config=small_config())
        save_dataset(dataset, self.tmp.name)
        for piece_id in ("piece000", "piece002"):
            os.remove(os.path.join(self.tmp.name, "pieces", piece_id, "audio.wav"))
        with self.assertRaises(DatasetValidationError) as ctx:
            load_dataset(self.tmp.name)
        self.assertEqual(sorted(ctx.exception.errors), ["piece000", "piece002"])

    def test_dataset_without_splits_uses_every_piece(self):
        dataset = Dataset([generate_piece(1, small_config(), "a")])
        self.assertEqual(len(dataset.split("train")), 1)

    def test_minimal_feature_metadata_is_enough(self):
        piece = generate_piece(8, small_config(features_only=True))
        save_piece(piece, self.piece_dir())
        with open(os.path.join(self.piece_dir(), "feats.json"), "w") as f:
            json.dump({"fps": 20, "standardized": False}, f)
        loaded = load_piece(self.piece_dir())
        self.assertEqual(loaded.features.frames.shape, piece.features.frames.shape)
        np.testing.assert_array_equal(loaded.features.frames, piece.features.frames)

    def test_feature_size_must_match_the_declared_frames(self):
        piece = generate_piece(8, small_config(features_only=True))
        save_piece(piece, self.piece_dir())
        self.rewrite(os.path.join(self.piece_dir(), "feats.json"), lambda data: data.update(frames=data["frames"] + 1))
        with self.assertRaisesMessage(DatasetValidationError, "feats_size"):
            load_piece(self.piece_dir())

    def test_feature_size_must_be_whole_frames(self):
        piece = generate_piece(8, small_config(features_only=True))
        save_piece(piece, self.piece_dir())
        with open(os.path.join(self.piece_dir(), "feats.json"), "w") as f:
            json.dump({"fps": 20, "standardized": False}, f)
        with open(os.path.join(self.piece_dir(), "feats.f32"), "ab") as f:
            f.write(np.zeros(3, dtype="<f4").tobytes())
        with self.assertRaisesMessage(DatasetValidationError, "feats_size"):
            load_piece(self.piece_dir())
