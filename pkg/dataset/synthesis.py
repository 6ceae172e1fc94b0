"""Additive sine synthesis of a note list and the staff-position to pitch mapping."""

import numpy as np
from django.conf import settings

from dsp.processing import AudioSignal

# semitones above E4 of the diatonic steps E F G A B C D
_DIATONIC = (0, 1, 3, 5, 7, 8, 10)
BOTTOM_LINE_PITCH = 64  # E4, bottom line of a treble staff

HARMONIC_AMPLITUDES = (1.0, 0.5, 0.25)
ATTACK_SECONDS = 0.005
PEAK = 0.8


def staff_step_to_pitch(step):
    """MIDI pitch of a notehead ``step`` half-spaces above the bottom staff line."""
    octave, degree = divmod(step, 7)
    return BOTTOM_LINE_PITCH + 12 * octave + _DIATONIC[degree]


def pitch_to_hz(pitch):
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def quantize(samples):
    """Snap samples to the 16-bit PCM grid so a WAV round trip is exact."""
    return (np.clip(np.round(samples * 32768.0), -32768, 32767) / 32768.0).astype(np.float32)


def synthesize(events, duration, sample_rate=None):
    """
    Fundamental plus two harmonics per note, exponentially decaying over the
    note's duration with a short linear attack. Peak normalized to 0.8.
    """
    sample_rate = sample_rate or settings.PAGETRACK["SAMPLE_RATE"]
    n_samples = int(np.ceil(duration * sample_rate))
    out = np.zeros(n_samples, dtype=np.float64)
    attack = max(int(ATTACK_SECONDS * sample_rate), 1)

    for event in events:
        start = int(np.floor(event.onset * sample_rate + 0.5))
        length = min(int(np.ceil(event.duration * sample_rate)), n_samples - start)
        if length <= 0:
            continue
        t = np.arange(length) / sample_rate
        f0 = pitch_to_hz(event.pitch)
        tone = sum(
            amplitude * np.sin(2 * np.pi * f0 * harmonic * t)
            for harmonic, amplitude in enumerate(HARMONIC_AMPLITUDES, start=1)
            if f0 * harmonic < sample_rate / 2
        )
        envelope = np.exp(-3.0 * t / event.duration)
        envelope[:attack] *= np.linspace(0.0, 1.0, attack, endpoint=False)[:length]
        out[start:start + length] += tone * envelope

    peak = np.abs(out).max() if n_samples else 0.0
    if peak > 0:
        out *= PEAK / peak
    return AudioSignal(quantize(out), sample_rate)
