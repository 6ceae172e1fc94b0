"""
Audio front end: centered framing, DFT magnitudes, a semi-logarithmic
triangular filterbank and per-bin standardization.
"""

import logging
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from scipy import fft
from scipy.io import wavfile
from scipy.signal import windows

from tensorcore.exceptions import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

MIN_STD = 1e-6


def _defaults():
    return settings.PAGETRACK


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    frames: np.ndarray  # [T, bins], time-major
    fps: int
    standardized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ContractViolation(f"spectrogram frames must be [T, bins], got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_bins(self):
        return self.frames.shape[1]

    def standardize(self, stats):
        if self.standardized:
            return self
        return Spectrogram(stats.apply(self.frames), self.fps, standardized=True)


@dataclass
class Filterbank:
    weights: np.ndarray  # [bins, window // 2 + 1]
    center_bins: np.ndarray
    center_frequencies: np.ndarray

    @property
    def n_bins(self):
        return self.weights.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if np.any(self.std <= 0):
            raise ConfigurationError("NormStats std must be positive in every bin")

    @classmethod
    def fit(cls, frame_sets):
        """Statistics over all frames of all given [T, bins] arrays."""
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in frame_sets if len(f)])
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), MIN_STD)
        return cls(mean, std)

    @classmethod
    def identity(cls, n_bins):
        return cls(np.zeros(n_bins), np.ones(n_bins))

    def apply(self, frames):
        return ((np.asarray(frames, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data):
        return cls(data["mean"], data["std"])


def frame_centers(n_samples, sample_rate, fps):
    """Sample index of every frame center; rounded per frame, never accumulated."""
    if n_samples == 0:
        return np.zeros(0, dtype=np.int64)
    n_frames = n_samples * fps // sample_rate + 1
    hop = sample_rate / fps
    return np.floor(np.arange(n_frames) * hop + 0.5).astype(np.int64)


def frame_signal(audio, fps=None, window=None):
    """Hann-windowed frames centered on round(t * sample_rate / fps), zero padded."""
    fps = fps or _defaults()["FPS"]
    window = window or _defaults()["WINDOW_SIZE"]
    centers = frame_centers(len(audio.samples), audio.sample_rate, fps)
    if len(centers) == 0:
        return np.zeros((0, window), dtype=np.float32)
    half = window // 2
    padded = np.pad(audio.samples, (half, window))
    index = centers[:, None] + np.arange(window)[None, :]
    hann = windows.hann(window, sym=False).astype(np.float32)
    return padded[index] * hann


def stft_magnitude(frames):
    """Magnitudes of DFT bins 0..window/2 for every frame."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[0] == 0:
        return np.zeros((0, frames.shape[1] // 2 + 1), dtype=np.float32)
    return np.abs(fft.rfft(frames, axis=1)).astype(np.float32)


def build_semilog_filterbank(fmin=None, fmax=None, bins=None, bands_per_octave=None,
                             sample_rate=None, window=None):
    """
    Triangular filters on a logarithmic grid snapped to FFT bins.

    Target centers are fmin * 2**(k / bands_per_octave) up to fmax. Snapped
    centers that land on the same FFT bin are merged, which leaves the low end
    sparse; the count is then brought to ``bins`` by filling the lowest unused
    FFT bins inside the covered range (linear spacing at the low end), or by
    dropping filters from the top. Each filter rises from the previous center
    to its own and falls to the next one, and is normalized to sum 1.
    """
    defaults = _defaults()
    fmin = fmin if fmin is not None else defaults["FMIN"]
    fmax = fmax if fmax is not None else defaults["FMAX"]
    bins = bins or defaults["N_BINS"]
    bands_per_octave = bands_per_octave or defaults["BANDS_PER_OCTAVE"]
    sample_rate = sample_rate or defaults["SAMPLE_RATE"]
    window = window or defaults["WINDOW_SIZE"]

    resolution = sample_rate / window
    n_fft_bins = window // 2 + 1
    n_targets = int(np.floor(bands_per_octave * np.log2(fmax / fmin))) + 1
    targets = fmin * 2.0 ** (np.arange(n_targets) / bands_per_octave)

    lowest = int(np.ceil(fmin / resolution))
    highest = int(np.floor(fmax / resolution))
    snapped = np.clip(np.floor(targets / resolution + 0.5).astype(int), lowest, highest)
    centers = sorted(set(snapped.tolist()))

    if len(centers) < bins:
        occupied = set(centers)
        free = [b for b in range(centers[0], highest + 1) if b not in occupied]
        missing = bins - len(centers)
        if len(free) < missing:
            raise ConfigurationError(
                f"{bins} filters are unreachable between {fmin} and {fmax} Hz "
                f"with {resolution:.2f} Hz FFT resolution"
            )
        centers = sorted(centers + free[:missing])
    elif len(centers) > bins:
        centers = centers[:bins]

    centers = np.asarray(centers)
    weights = np.zeros((bins, n_fft_bins), dtype=np.float64)
    for i, center in enumerate(centers):
        left = centers[i - 1] if i > 0 else center - 1
        right = centers[i + 1] if i + 1 < bins else center + 1
        rising = np.arange(left + 1, center + 1)
        falling = np.arange(center + 1, right)
        weights[i, rising] = (rising - left) / (center - left)
        weights[i, falling] = (right - falling) / (right - center)
        weights[i] /= weights[i].sum()

    logger.debug(f"Built {bins}-band filterbank over FFT bins {centers[0]}..{centers[-1]}")
    return Filterbank(
        weights=weights.astype(np.float32),
        center_bins=centers,
        center_frequencies=centers * resolution,
    )


def spectrogram(audio, filterbank, stats=None, fps=None, window=None):
    """
    Filterbank energies compressed with ln(1 + x); standardized when ``stats``
    is given, raw otherwise (the pass that collects training statistics).
    """
    fps = fps or _defaults()["FPS"]
    magnitudes = stft_magnitude(frame_signal(audio, fps, window))
    frames = np.log1p(magnitudes @ filterbank.weights.T).astype(np.float32)
    if stats is None:
        return Spectrogram(frames, fps, standardized=False)
    return Spectrogram(stats.apply(frames), fps, standardized=True)


def read_wav(path):
    """Mono 16-bit PCM or 32-bit float WAV at the pipeline sample rate."""
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ContractViolation(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise ContractViolation(f"{path}: unsupported sample format {data.dtype}")
    expected = _defaults()["SAMPLE_RATE"]
    if sample_rate != expected:
        raise ContractViolation(f"{path}: sample rate {sample_rate} Hz, expected {expected} Hz (no resampling)")
    return AudioSignal(samples, sample_rate)


def write_wav(path, audio):
    """16-bit PCM with the canonical 44-byte header."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, audio.sample_rate, pcm)
