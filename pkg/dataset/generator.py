"""
Procedural single-page pieces: staves with noteheads, stems, ledger and bar
lines drawn with PIL, the notehead alignment, and synthesized audio.

All drawing happens at full resolution on a grid of multiples of the
downscale factor, so equal bars stay pixel-identical at model resolution.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from django.conf import settings
from PIL import Image, ImageDraw

from dsp.processing import build_semilog_filterbank, spectrogram

from .augmentation import augment_reverb
from .exceptions import GenerationError
from .synthesis import staff_step_to_pitch, synthesize
from .types import AlignmentTrack, Dataset, Event, Piece, ScorePage, Staff

logger = logging.getLogger(__name__)

INK = 0
PAPER = 255
LOWEST_STEP, HIGHEST_STEP = -3, 11  # half-spaces above the bottom line
BEATS = (0.5, 1.0, 1.0, 1.0, 2.0)


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 192  # model resolution
    width: int = 256
    downscale: int = field(default_factory=lambda: settings.PAGETRACK["DOWNSCALE"])
    staves: int = 3
    notes_per_staff: int = 12
    notes_per_bar: int = 4
    line_spacing: int = 4  # model pixels between staff lines
    tempo_range: tuple = (80.0, 140.0)  # beats per minute
    lead_in: float = 0.5
    tail: float = 1.0
    ambiguity: bool = False
    features_only: bool = False
    reverb: float = 0.0  # RT60 in seconds, 0 is dry
    sample_rate: int = field(default_factory=lambda: settings.PAGETRACK["SAMPLE_RATE"])

    def to_dict(self):
        data = asdict(self)
        data["tempo_range"] = list(self.tempo_range)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "tempo_range" in data:
            data["tempo_range"] = tuple(data["tempo_range"])
        return cls(**data)


@dataclass
class _Layout:
    factor: int
    space: int
    staves: list
    slot: int
    bar_width: int
    band: int

    @property
    def bars_per_staff(self):
        return int(round(self.staves[0].length)) // self.bar_width

    def bar_start(self, staff, bar):
        return int(self.staves[staff].x_start) + bar * self.bar_width

    def note_x(self, staff, bar, slot):
        """Full-resolution notehead x; a whole number of model pixels."""
        return self.bar_start(staff, bar) + slot * self.slot + _snap(self.slot // 2, self.factor)

    def bar_region(self, staff, bar):
        """Full-resolution (x0, y0, x1, y1), end exclusive, of a bar's interior."""
        f = self.factor
        y_center = int(self.staves[staff].y_center)
        reach = int(4.5 * self.space) // f * f
        x0 = self.bar_start(staff, bar) + f
        x1 = self.bar_start(staff, bar) + self.bar_width - f
        return (x0, y_center - reach, x1, y_center + reach)


def _snap(value, factor):
    return int(value) // factor * factor


def plan_layout(config):
    if config.notes_per_staff < 1 or config.staves < 1 or config.notes_per_bar < 1:
        raise GenerationError("a piece needs at least one staff, one bar and one note")
    if config.notes_per_staff % config.notes_per_bar:
        raise GenerationError(
            f"{config.notes_per_staff} notes per staff do not split into bars of {config.notes_per_bar}"
        )
    f = config.downscale
    height, width = config.height * f, config.width * f
    space = config.line_spacing * f
    if space % 2:
        raise GenerationError("staff line spacing must be even at full resolution")

    band = height // config.staves
    if band < 10 * space:
        raise GenerationError(f"{config.staves} staves do not fit on a {config.height} px page")

    margin = 4 * space
    slot = _snap((width - 2 * margin) / config.notes_per_staff, f)
    if slot < int(2.5 * space):
        raise GenerationError(
            f"{config.notes_per_staff} notes per staff do not fit on a {config.width} px page"
        )
    bar_width = slot * config.notes_per_bar
    staves = []
    for index in range(config.staves):
        y_center = _snap(band * (index + 0.5), f)
        x_start = _snap(margin, f)
        staves.append(Staff(
            y_center=float(y_center),
            y_top=float(y_center - 2 * space),
            y_bottom=float(y_center + 2 * space),
            x_start=float(x_start),
            x_end=float(x_start + slot * config.notes_per_staff),
        ))
    return _Layout(f, space, staves, slot, bar_width, band)


def _compose(config, layout, rng):
    """Per bar: list of (step, beats). Returns patterns and the duplicated bars."""
    n_bars = config.staves * layout.bars_per_staff
    patterns = []
    step = int(rng.integers(0, 9))
    for _ in range(n_bars):
        bar = []
        for _ in range(config.notes_per_bar):
            step = int(np.clip(step + rng.integers(-3, 4), LOWEST_STEP, HIGHEST_STEP))
            bar.append((step, float(rng.choice(BEATS))))
        patterns.append(bar)

    duplicates = ()
    if config.ambiguity:
        if n_bars < 2:
            raise GenerationError("ambiguity mode needs at least two bars")
        source, target = rng.choice(n_bars, size=2, replace=False)
        patterns[target] = list(patterns[source])
        per_staff = layout.bars_per_staff
        duplicates = tuple(
            layout.bar_region(int(index) // per_staff, int(index) % per_staff) for index in sorted((source, target))
        )
    return patterns, duplicates


def _draw(config, layout, patterns):
    f, space = layout.factor, layout.space
    image = Image.new("L", (config.width * f, config.height * f), PAPER)
    draw = ImageDraw.Draw(image)
    head_w, head_h = int(1.4 * space) // 2 * 2, space
    ledger_half = int(0.9 * space)
    stem = int(3.5 * space)

    def hline(x0, x1, y):
        draw.rectangle([x0, y, x1 - 1, y + f - 1], fill=INK)

    def vline(x, y0, y1):
        draw.rectangle([x, y0, x + f - 1, y1 - 1], fill=INK)

    for s_index, staff in enumerate(layout.staves):
        x_start, x_end = int(staff.x_start), int(staff.x_end)
        for line in range(5):
            hline(x_start, x_end, int(staff.y_top) + line * space)
        for bar in range(layout.bars_per_staff + 1):
            x = x_start + bar * layout.bar_width
            vline(min(x, x_end - f), int(staff.y_top), int(staff.y_bottom) + f)

        for bar in range(layout.bars_per_staff):
            for slot, (step, _) in enumerate(patterns[s_index * layout.bars_per_staff + bar]):
                x = layout.note_x(s_index, bar, slot)
                y = int(staff.y_bottom) - step * space // 2
                for ledger in range(-2, step - 1, -2):
                    hline(x - ledger_half, x + ledger_half, int(staff.y_bottom) - ledger * space // 2)
                for ledger in range(10, step + 1, 2):
                    hline(x - ledger_half, x + ledger_half, int(staff.y_bottom) - ledger * space // 2)
                draw.ellipse([x - head_w // 2, y - head_h // 2, x + head_w // 2, y + head_h // 2], fill=INK)
                if step < 4:
                    vline(x + head_w // 2 - f, y - stem, y)
                else:
                    vline(x - head_w // 2, y, y + stem)
    return np.asarray(image)


def _align(config, layout, patterns, bpm):
    """Notehead alignment; onsets and durations fall on the analysis frame grid."""
    hop = 1.0 / settings.PAGETRACK["FPS"]
    seconds_per_beat = 60.0 / bpm
    events = []
    frame = int(round(config.lead_in / hop))
    for index, bar in enumerate(patterns):
        s_index, bar_index = divmod(index, layout.bars_per_staff)
        staff = layout.staves[s_index]
        for slot, (step, beats) in enumerate(bar):
            x = layout.note_x(s_index, bar_index, slot)
            length = max(int(round(beats * seconds_per_beat / hop)), 1)
            events.append(Event(
                onset=round(frame * hop, 6),
                x=float(x),
                y=staff.y_center,
                staff=s_index,
                pitch=staff_step_to_pitch(step),
                duration=round(length * hop, 6),
            ))
            frame += length
    return AlignmentTrack(events)


def generate_piece(seed, config=None, piece_id=None, filterbank=None):
    """Deterministic in (seed, config)."""
    config = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    layout = plan_layout(config)
    patterns, duplicates = _compose(config, layout, rng)
    bpm = float(rng.uniform(*config.tempo_range))
    track = _align(config, layout, patterns, bpm)

    last = track.events[-1]
    audio = synthesize(track.events, last.onset + last.duration + config.tail, config.sample_rate)
    if config.reverb > 0:
        audio = augment_reverb(audio, config.reverb, rng)

    page = ScorePage(_draw(config, layout, patterns), layout.staves, settings.PAGETRACK["DPI"], config.downscale)
    piece = Piece(
        id=piece_id or f"synth-{seed}",
        page=page,
        track=track,
        audio=audio,
        seed=seed,
        duplicates=duplicates,
    )
    if config.features_only:
        filterbank = filterbank or build_semilog_filterbank(sample_rate=config.sample_rate)
        piece.features = spectrogram(audio, filterbank)
        piece.audio = None
    logger.debug(f"Generated {piece.id}: {len(track)} notes at {bpm:.1f} bpm, {piece.duration:.1f} s")
    return piece


def split_ids(ids, val_fraction, test_fraction):
    """Deterministic split: the last pieces go to test, the ones before to validation."""
    n = len(ids)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    if n_test + n_val >= n:
        n_test, n_val = 0, 0
    train = ids[: n - n_val - n_test]
    return {"train": train, "val": ids[len(train): n - n_test], "test": ids[n - n_test:]}


def generate_dataset(n_pieces, seed, config=None, val_fraction=0.25, test_fraction=0.0):
    """``n_pieces`` pieces whose seeds are spawned from one root seed."""
    if n_pieces < 1:
        raise GenerationError("at least one piece is required")
    config = config or GeneratorConfig()
    children = np.random.SeedSequence(seed).spawn(n_pieces)
    filterbank = build_semilog_filterbank(sample_rate=config.sample_rate) if config.features_only else None
    pieces = []
    for index, child in enumerate(children):
        piece_seed = int(child.generate_state(1, dtype=np.uint32)[0])
        pieces.append(generate_piece(piece_seed, config, f"piece{index:03d}", filterbank))
    ids = [p.id for p in pieces]
    logger.info(f"Generated {n_pieces} pieces from root seed {seed}")
    return Dataset(pieces, split_ids(ids, val_fraction, test_fraction))
