import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from .processing import (
    AudioSignal,
    NormStats,
    build_semilog_filterbank,
    frame_centers,
    frame_signal,
    read_wav,
    spectrogram,
    stft_magnitude,
    write_wav,
)

SR = 22050


def tone(freq, seconds=1.0, amplitude=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return AudioSignal(amplitude * np.sin(2 * np.pi * freq * t), SR)


class FramingTests(SimpleTestCase):
    def test_centers_are_rounded_per_frame(self):
        centers = frame_centers(SR * 10, SR, 20)
        self.assertEqual(centers[0], 0)
        self.assertEqual(centers[2], 2205)
        # no drift after many frames
        self.assertEqual(centers[200], 22050 * 10)

    def test_one_second_gives_twenty_frames_plus_center_frame(self):
        frames = frame_signal(AudioSignal(np.zeros(SR - 1), SR), 20, 2048)
        self.assertEqual(len(frames), 20)
        frames = frame_signal(AudioSignal(np.zeros(int(SR * 2.5)), SR), 20, 2048)
        self.assertEqual(len(frames), int(2.5 * 20) + 1)

    def test_silence_gives_zero_windows(self):
        frames = frame_signal(AudioSignal(np.zeros(4000), SR), 20, 2048)
        self.assertFalse(frames.any())

    def test_empty_audio(self):
        self.assertEqual(frame_signal(AudioSignal(np.zeros(0), SR), 20, 2048).shape, (0, 2048))

    def test_causality(self):
        audio = tone(440, 2.0)
        reference = frame_signal(audio, 20, 2048)
        t = 10
        cut = frame_centers(len(audio.samples), SR, 20)[t] + 1024
        changed = audio.samples.copy()
        changed[cut:] = 0.9
        frames = frame_signal(AudioSignal(changed, SR), 20, 2048)
        np.testing.assert_array_equal(frames[: t + 1], reference[: t + 1])


class StftTests(SimpleTestCase):
    def test_zero_window(self):
        self.assertFalse(stft_magnitude(np.zeros((2, 2048))).any())

    def test_bin_center_sine(self):
        k = 37
        n = np.arange(2048)
        frame = np.sin(2 * np.pi * k * n / 2048)[None, :]
        spectrum = stft_magnitude(frame)[0]
        self.assertEqual(spectrum.shape, (1025,))
        self.assertEqual(int(np.argmax(spectrum)), k)
        self.assertGreater(spectrum[k] ** 2, 0.99 * (spectrum ** 2).sum())

    def test_parseval(self):
        frame = np.random.default_rng(0).standard_normal((1, 2048)).astype(np.float32)
        half = stft_magnitude(frame)[0].astype(np.float64) ** 2
        full = half[0] + half[-1] + 2 * half[1:-1].sum()
        energy = (frame.astype(np.float64) ** 2).sum()
        self.assertLess(abs(full / 2048 - energy) / energy, 1e-6)


class FilterbankTests(SimpleTestCase):
    def setUp(self):
        self.fb = build_semilog_filterbank(60, 6000, 78, 12, SR, 2048)

    def test_count_and_shape(self):
        self.assertEqual(self.fb.n_bins, 78)
        self.assertEqual(self.fb.weights.shape, (78, 1025))

    def test_centers_in_range_and_increasing(self):
        freqs = self.fb.center_frequencies
        self.assertTrue(np.all(np.diff(freqs) > 0))
        self.assertGreaterEqual(freqs.min(), 60)
        self.assertLessEqual(freqs.max(), 6000)

    def test_rows_normalized_and_nonnegative(self):
        self.assertTrue(np.all(self.fb.weights >= 0))
        np.testing.assert_allclose(self.fb.weights.sum(axis=1), 1.0, atol=1e-6)

    def test_low_end_is_linear(self):
        self.assertTrue(np.all(np.diff(self.fb.center_bins[:10]) == 1))


class SpectrogramTests(SimpleTestCase):
    def setUp(self):
        self.fb = build_semilog_filterbank()

    def test_frame_count_and_bins(self):
        spec = spectrogram(tone(440, 3.0), self.fb)
        self.assertEqual(spec.frames.shape, (61, 78))
        self.assertFalse(spec.standardized)

    def test_standardizing_with_own_stats(self):
        audio = AudioSignal(np.concatenate([tone(f, 1.0).samples for f in (220, 330, 523, 880)]), SR)
        raw = spectrogram(audio, self.fb)
        stats = NormStats.fit([raw.frames])
        spec = raw.standardize(stats)
        self.assertTrue(spec.standardized)
        # bins that barely vary lose their precision to float32 rounding
        varying = stats.std > 0.1
        self.assertTrue(varying.any())
        frames = spec.frames.astype(np.float64)[:, varying]
        np.testing.assert_allclose(frames.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(frames.var(axis=0), 1.0, atol=1e-4)

    def test_silence_with_stats_is_constant(self):
        stats = NormStats(np.linspace(0, 1, 78), np.linspace(1, 2, 78))
        spec = spectrogram(AudioSignal(np.zeros(SR), SR), self.fb, stats)
        expected = (-stats.mean / stats.std).astype(np.float32)
        for frame in spec.frames:
            np.testing.assert_allclose(frame, expected, rtol=1e-6)

    def test_louder_audio_never_decreases_bins(self):
        audio = tone(660, 1.0, 0.3)
        quiet = spectrogram(audio, self.fb).frames
        loud = spectrogram(AudioSignal(audio.samples * 2, SR), self.fb).frames
        self.assertTrue(np.all(loud >= quiet))

    def test_deterministic(self):
        audio = tone(300, 1.0)
        first = spectrogram(audio, self.fb).frames
        second = spectrogram(audio, self.fb).frames
        self.assertEqual(first.tobytes(), second.tobytes())


class WavTests(SimpleTestCase):
    def test_pcm_round_trip(self):
        samples = np.round(tone(440, 0.5).samples * 32768) / 32768
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "audio.wav")
            write_wav(path, AudioSignal(samples, SR))
            self.assertEqual(os.path.getsize(path), 44 + 2 * len(samples))
            loaded = read_wav(path)
        np.testing.assert_array_equal(loaded.samples, samples.astype(np.float32))
        self.assertEqual(loaded.sample_rate, SR)
