"""
Online score following: one audio frame in, one score position out.

Each step pushes the frame into a fixed-size ring buffer, runs the encoder
and the conditioner once and evaluates the U-Net on the cached page, so the
work per step does not depend on how long the stream has been running.
"""

import logging
import time
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from django.conf import settings

from dataset.positions import target_center_offset, unrolled_offsets
from dsp.processing import build_semilog_filterbank, spectrogram
from network.encoders import RecurrentState
from network.unet import PreparedPage
from tensorcore.exceptions import ContractViolation

logger = logging.getLogger(__name__)


def _threshold(threshold):
    return settings.PAGETRACK["THRESHOLD"] if threshold is None else threshold


def center_of_mass(mask, threshold=None, weighted=True):
    """
    (x, y) mean of the pixels with p >= threshold, weighted by p unless
    ``weighted`` is off. None when no pixel passes.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[0]
    rows, cols = np.nonzero(mask >= _threshold(threshold))
    if len(rows) == 0:
        return None
    weights = mask[rows, cols] if weighted else np.ones(len(rows))
    norm = weights.sum()
    return float(cols @ weights / norm), float(rows @ weights / norm)


def nearest_staff(y, staves):
    """Index of the staff whose center is closest to y; the lower index wins ties."""
    return int(np.argmin([abs(y - s.y_center) for s in staves]))


def map_to_time(position, page, track):
    """
    Score time of a page position: y snaps to the nearest staff, x becomes
    an unrolled coordinate and the onset-time to unrolled-x map is inverted
    piecewise linearly (clamped outside the aligned range).
    """
    if position is None:
        raise ContractViolation("cannot map an invalid position to time")
    if len(track) == 0:
        raise ContractViolation("cannot map to time without an alignment")
    staves = page.staves
    offsets = unrolled_offsets(staves)
    x, y = position
    index = nearest_staff(y, staves)
    staff = staves[index]
    u = offsets[index] + float(np.clip(x, staff.x_start, staff.x_end)) - staff.x_start
    knots = np.array([offsets[e.staff] + e.x - staves[e.staff].x_start for e in track.events])
    return float(np.interp(u, knots, track.onsets))


def score_time(position, page, track, width=None):
    """
    ``map_to_time`` for the center of a predicted mask. Target rectangles sit
    half a pixel left of their score position, so x is shifted back first.
    """
    if position is None:
        raise ContractViolation("cannot map an invalid position to time")
    x, y = position
    return map_to_time((x + target_center_offset(width), y), page, track)


@dataclass
class TrackerState:
    recurrent: RecurrentState
    ring: np.ndarray  # [window frames, bins], oldest first
    step: int
    page: PreparedPage
    last_mask: Optional[np.ndarray] = None
    last_position: Optional[tuple] = None


class Prediction(NamedTuple):
    mask: np.ndarray  # probabilities [H, W]
    position: Optional[tuple]  # (x, y) at model resolution, held while invalid
    valid: bool
    step_latency: float  # seconds
    reused: bool = False  # mask carried over in stride mode


def tracker_init(model, page):
    """Zero recurrent state, zero-filled frame buffer and the padded page."""
    if hasattr(page, "ink"):
        page = page.ink()
    prepared = model.prepare(page)
    config = model.config
    ring = np.zeros((config.window_frames, config.n_bins), dtype=np.float32)
    return TrackerState(model.initial_state(), ring, 0, prepared)


def tracker_step(model, state, frame, threshold=None, weighted=True, stride=1):
    """
    Consume one standardized frame. With ``stride`` k > 1 the U-Net only runs
    on every k-th step and the mask in between is reused; the recurrent state
    is still advanced on every frame.
    """
    started = time.perf_counter()
    frame = np.asarray(frame, dtype=np.float32)
    if frame.shape != (model.config.n_bins,):
        raise ContractViolation(f"frame must have {model.config.n_bins} bins, got {frame.shape}")
    ring = np.concatenate([state.ring[1:], frame[None]])
    z, recurrent = model.condition(model.embed(ring, len(ring) - 1), state.recurrent)

    reused = stride > 1 and state.last_mask is not None and state.step % stride != 0
    mask = state.last_mask if reused else model.segment(state.page, z).data[0]
    position = center_of_mass(mask, threshold, weighted)
    valid = position is not None
    if not valid:
        position = state.last_position

    state = replace(state, recurrent=recurrent, ring=ring, step=state.step + 1, last_mask=mask,
                    last_position=position)
    return Prediction(mask, position, valid, time.perf_counter() - started, reused), state


def standardized_frames(model, piece, filterbank=None):
    """The piece's spectrogram standardized with the model's statistics."""
    features = piece.features
    if features is not None:
        return features.frames if features.standardized else model.stats.apply(features.frames)
    filterbank = filterbank or build_semilog_filterbank(bins=model.config.n_bins)
    return spectrogram(piece.audio, filterbank, stats=model.stats).frames


class ScoreTracker:
    """A single stream following one page; several trackers may share a model."""

    def __init__(self, model, page, threshold=None, weighted=True, stride=1):
        if stride < 1:
            raise ContractViolation(f"stride must be at least 1, got {stride}")
        self.model = model
        self.page = page
        self.threshold = threshold
        self.weighted = weighted
        self.stride = stride
        self.state = tracker_init(model, page)

    @property
    def steps(self):
        return self.state.step

    def step(self, frame):
        prediction, self.state = tracker_step(
            self.model, self.state, frame, self.threshold, self.weighted, self.stride
        )
        return prediction

    def run(self, frames):
        predictions = [self.step(frame) for frame in frames]
        invalid = sum(not p.valid for p in predictions)
        if invalid:
            logger.info(f"{invalid} of {len(predictions)} steps had no pixel above threshold")
        return predictions
