import logging
from dataclasses import replace

import numpy as np
from django.conf import settings
from scipy import ndimage, signal
from scipy.interpolate import interp1d

from dsp.processing import AudioSignal, Spectrogram, build_semilog_filterbank, spectrogram
from tensorcore.exceptions import ContractViolation

from .synthesis import quantize, synthesize

logger = logging.getLogger(__name__)


def tempo_factors():
    return list(settings.PAGETRACK["TEMPO_FACTORS"])


def augment_shift(page, masks, dx, dy):
    """
    Shift a [H, W] ink page and its [..., H, W] masks by whole pixels
    (dx to the right, dy down). Uncovered pixels are blank paper.
    """
    dx, dy = int(dx), int(dy)
    if dx == 0 and dy == 0:
        return page, masks
    page = ndimage.shift(np.asarray(page), (dy, dx), order=0, mode="constant", cval=0.0)
    masks = np.asarray(masks)
    offset = (0,) * (masks.ndim - 2) + (dy, dx)
    masks = ndimage.shift(masks.astype(np.uint8), offset, order=0, mode="constant", cval=0).astype(bool)
    return page, masks


def augment_tempo(piece, factor, filterbank=None):
    """
    The same piece played ``factor`` times faster: onsets and durations are
    divided by the factor, the page is untouched. Pieces with a note list are
    resynthesized; feature-only pieces get their frame timeline resampled.
    """
    if factor <= 0:
        raise ContractViolation(f"tempo factor must be positive, got {factor}")
    if factor == 1.0:
        return piece
    track = piece.track.time_scaled(factor)

    if track.has_notes:
        last = max(e.onset + e.duration for e in track.events)
        tail = max(piece.duration - max(e.onset + e.duration for e in piece.track.events), 0.0)
        sample_rate = piece.audio.sample_rate if piece.audio is not None else None
        audio = synthesize(track.events, last + tail / factor, sample_rate)
        logger.debug(f"Resynthesized {piece.id} at tempo factor {factor:.3f}")
        if piece.audio is not None:
            return replace(piece, track=track, audio=audio, features=None)
        filterbank = filterbank or build_semilog_filterbank()
        return replace(piece, track=track, audio=None, features=spectrogram(audio, filterbank, fps=piece.features.fps))

    features = piece.features
    if features is None:
        filterbank = filterbank or build_semilog_filterbank()
        features = spectrogram(piece.audio, filterbank)
    return replace(piece, track=track, audio=None, features=resample_frames(features, factor))


def resample_frames(features, factor):
    """Linear interpolation of a frame timeline played ``factor`` times faster."""
    n_old = len(features)
    duration = (n_old - 1) / features.fps
    n_new = int(np.floor(duration / factor * features.fps)) + 1
    source_times = np.arange(n_old) / features.fps
    target_times = np.arange(n_new) / features.fps * factor
    if n_old == 1:
        return Spectrogram(np.repeat(features.frames, n_new, axis=0), features.fps, features.standardized)
    resample = interp1d(source_times, features.frames, axis=0, assume_sorted=True)
    frames = resample(np.clip(target_times, 0.0, source_times[-1]))
    return Spectrogram(frames, features.fps, features.standardized)


def augment_reverb(audio, rt60, rng):
    """
    Convolve with exponentially decaying noise reaching -60 dB after ``rt60``
    seconds; the result keeps the original length and peak level.
    """
    if rt60 <= 0:
        return audio
    length = max(int(rt60 * audio.sample_rate), 1)
    t = np.arange(length) / audio.sample_rate
    impulse = rng.standard_normal(length) * np.exp(-6.9078 * t / rt60)
    impulse[0] = 1.0
    wet = signal.fftconvolve(audio.samples.astype(np.float64), impulse)[: len(audio.samples)]
    peak_in = np.abs(audio.samples).max() if len(audio.samples) else 0.0
    peak_out = np.abs(wet).max() if len(wet) else 0.0
    if peak_out > 0:
        wet *= peak_in / peak_out
    return AudioSignal(quantize(wet), audio.sample_rate)
