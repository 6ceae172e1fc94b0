"""
In-memory pieces: a score page with its staves, the notehead alignment and
either audio or precomputed spectrogram frames.

Pieces are stored at full page resolution; ``Piece.model_view``
gives the downscaled view the network works on.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from dsp.processing import AudioSignal, Spectrogram


@dataclass(frozen=True)
class Staff:
    y_center: float
    y_top: float
    y_bottom: float
    x_start: float
    x_end: float

    @property
    def height(self):
        return self.y_bottom - self.y_top

    @property
    def space(self):
        """Distance between two staff lines."""
        return self.height / 4.0

    @property
    def length(self):
        return self.x_end - self.x_start

    def scaled(self, factor):
        return Staff(*(value / factor for value in (self.y_center, self.y_top, self.y_bottom, self.x_start, self.x_end)))

    def to_dict(self):
        return {
            "y_center": self.y_center,
            "y_top": self.y_top,
            "y_bottom": self.y_bottom,
            "x_start": self.x_start,
            "x_end": self.x_end,
        }


@dataclass
class ScorePage:
    image: np.ndarray  # uint8 grayscale, 255 is paper
    staves: list
    dpi: int = 72
    downscale: int = 1

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    def ink(self):
        """Network input convention: 1 - gray / 255, so ink is 1 and paper 0."""
        return (1.0 - self.image.astype(np.float32) / 255.0).astype(np.float32)

    def at_model_resolution(self):
        if self.downscale == 1:
            return self
        factor = self.downscale
        size = (self.width // factor, self.height // factor)
        image = np.asarray(Image.fromarray(self.image).resize(size, Image.Resampling.BOX))
        return ScorePage(image, [s.scaled(factor) for s in self.staves], self.dpi, downscale=1)


class Position(NamedTuple):
    x: float
    y: float
    staff: int


@dataclass(frozen=True)
class Event:
    onset: float
    x: float
    y: float
    staff: int
    pitch: Optional[int] = None  # MIDI number, kept for resynthesis
    duration: Optional[float] = None  # seconds

    def scaled(self, factor):
        return replace(self, x=self.x / factor, y=self.y / factor)

    def to_dict(self):
        data = {"onset": self.onset, "x": self.x, "y": self.y, "staff": self.staff}
        if self.pitch is not None:
            data["pitch"] = self.pitch
        if self.duration is not None:
            data["duration"] = self.duration
        return data


@dataclass
class AlignmentTrack:
    events: list

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def onsets(self):
        return np.array([e.onset for e in self.events], dtype=np.float64)

    @property
    def has_notes(self):
        return bool(self.events) and all(e.pitch is not None and e.duration is not None for e in self.events)

    def scaled(self, factor):
        return AlignmentTrack([e.scaled(factor) for e in self.events])

    def time_scaled(self, factor):
        """Onsets and durations divided by ``factor`` (faster playing for factor > 1)."""
        return AlignmentTrack([
            replace(e, onset=e.onset / factor, duration=None if e.duration is None else e.duration / factor)
            for e in self.events
        ])


@dataclass
class Piece:
    id: str
    page: ScorePage
    track: AlignmentTrack
    audio: Optional[AudioSignal] = None
    features: Optional[Spectrogram] = None
    seed: Optional[int] = None
    duplicates: tuple = ()  # full-resolution (x0, y0, x1, y1) regions drawn identically

    @property
    def ambiguous(self):
        return bool(self.duplicates)

    @property
    def duration(self):
        if self.audio is not None:
            return self.audio.duration
        if self.features is not None:
            return (len(self.features) - 1) / self.features.fps
        return 0.0

    @cached_property
    def model_view(self):
        """(page, track) at model resolution."""
        factor = self.page.downscale
        page = self.page.at_model_resolution()
        track = self.track if factor == 1 else self.track.scaled(factor)
        return page, track


@dataclass
class Dataset:
    pieces: list
    splits: dict = field(default_factory=dict)  # split name -> piece ids

    def __len__(self):
        return len(self.pieces)

    def __iter__(self):
        return iter(self.pieces)

    def get(self, piece_id):
        for piece in self.pieces:
            if piece.id == piece_id:
                return piece
        raise KeyError(piece_id)

    def split(self, name):
        """Pieces of a named split; every piece when the dataset has no splits."""
        if not self.splits:
            return list(self.pieces)
        ids = set(self.splits.get(name, ()))
        return [p for p in self.pieces if p.id in ids]
