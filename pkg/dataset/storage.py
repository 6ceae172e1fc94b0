"""
On-disk dataset layout::

    manifest.json
    pieces/<id>/page.pgm      binary PGM, full resolution
    pieces/<id>/meta.json     staves, dpi, downscale factor
    pieces/<id>/align.json    events (onset, x, y, staff[, pitch, duration])
    pieces/<id>/audio.wav     16-bit PCM
      or feats.f32 + feats.json   float32 little-endian, frame-major

Coordinates are full-resolution pixels.
"""

import json
import logging
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from dsp.processing import Spectrogram, read_wav, write_wav
from tensorcore.exceptions import PagetrackError

from .exceptions import DatasetValidationError
from .serializers import AlignmentSerializer, FeatureMetaSerializer, PageMetaSerializer
from .types import AlignmentTrack, Dataset, Event, Piece, ScorePage, Staff

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_piece(piece, directory):
    os.makedirs(directory, exist_ok=True)
    page = piece.page
    Image.fromarray(page.image).save(os.path.join(directory, "page.pgm"), format="PPM")
    _write_json(os.path.join(directory, "meta.json"), {
        "dpi": page.dpi,
        "downscale": page.downscale,
        "height": page.height,
        "width": page.width,
        "staves": [s.to_dict() for s in page.staves],
        "seed": piece.seed,
        "duplicates": [list(region) for region in piece.duplicates],
    })
    _write_json(os.path.join(directory, "align.json"), {"events": [e.to_dict() for e in piece.track]})
    if piece.audio is not None:
        write_wav(os.path.join(directory, "audio.wav"), piece.audio)
    if piece.features is not None:
        frames = np.ascontiguousarray(piece.features.frames, dtype="<f4")
        with open(os.path.join(directory, "feats.f32"), "wb") as f:
            f.write(frames.tobytes())
        _write_json(os.path.join(directory, "feats.json"), {
            "fps": piece.features.fps,
            "standardized": piece.features.standardized,
            "n_bins": frames.shape[1],
            "frames": frames.shape[0],
        })


def save_dataset(dataset, directory, extra=None):
    """Writes every piece plus a manifest with seeds, flags and splits."""
    os.makedirs(os.path.join(directory, "pieces"), exist_ok=True)
    for piece in dataset:
        save_piece(piece, os.path.join(directory, "pieces", piece.id))
    manifest = {
        "pieces": [{"id": p.id, "seed": p.seed, "ambiguous": p.ambiguous} for p in dataset],
        "splits": dataset.splits,
    }
    manifest.update(extra or {})
    _write_json(os.path.join(directory, MANIFEST), manifest)
    logger.info(f"Saved {len(dataset)} pieces to {directory}")


def _messages(errors, prefix=""):
    """Flatten nested DRF error structures into readable lines."""
    if isinstance(errors, dict):
        lines = []
        for key, value in errors.items():
            label = prefix if key == "non_field_errors" else f"{prefix}{key}: "
            lines.extend(_messages(value, label))
        return lines
    if isinstance(errors, list):
        lines = []
        for index, value in enumerate(errors):
            if isinstance(value, (dict, list)):
                if value:
                    lines.extend(_messages(value, f"{prefix}[{index}] "))
            else:
                lines.append(f"{prefix}{value}")
        return lines
    return [f"{prefix}{errors}"]


def load_piece(directory, piece_id=None):
    """Loads and validates one piece; raises DatasetValidationError listing every problem."""
    piece_id = piece_id or os.path.basename(os.path.normpath(directory))
    problems = []

    def fail():
        raise DatasetValidationError({piece_id: problems})

    try:
        meta = _read_json(os.path.join(directory, "meta.json"))
        align = _read_json(os.path.join(directory, "align.json"))
    except (OSError, ValueError) as e:
        problems.append(f"unreadable metadata: {e}")
        fail()

    meta_serializer = PageMetaSerializer(data=meta)
    if not meta_serializer.is_valid():
        problems.extend(_messages(meta_serializer.errors, "meta.json "))
        fail()
    meta = meta_serializer.validated_data
    staves = [Staff(**dict(s)) for s in meta["staves"]]

    try:
        with Image.open(os.path.join(directory, "page.pgm")) as image:
            pixels = np.asarray(image.convert("L"))
        if pixels.shape != (meta["height"], meta["width"]):
            problems.append(f"page_size: image is {pixels.shape}, meta.json says {(meta['height'], meta['width'])}")
    except (OSError, UnidentifiedImageError) as e:
        problems.append(f"page image: {e}")

    audio = features = None
    wav_path = os.path.join(directory, "audio.wav")
    feats_path = os.path.join(directory, "feats.f32")
    if os.path.exists(wav_path):
        try:
            audio = read_wav(wav_path)
        except (PagetrackError, OSError, ValueError) as e:
            problems.append(f"audio: {e}")
    if os.path.exists(feats_path):
        features = _load_features(directory, problems)
    if not os.path.exists(wav_path) and not os.path.exists(feats_path):
        problems.append("audio_or_features: piece has neither audio.wav nor feats.f32")

    duration = None
    if audio is not None:
        duration = audio.duration
    elif features is not None:
        duration = (len(features) - 1) / features.fps
    align_serializer = AlignmentSerializer(data=align, context={"staves": meta["staves"], "duration": duration})
    if not align_serializer.is_valid():
        problems.extend(_messages(align_serializer.errors, "align.json "))
    if problems:
        fail()

    track = AlignmentTrack([Event(**dict(e)) for e in align_serializer.validated_data["events"]])
    page = ScorePage(pixels, staves, meta["dpi"], meta["downscale"])
    return Piece(
        id=piece_id,
        page=page,
        track=track,
        audio=audio,
        features=features,
        seed=meta.get("seed"),
        duplicates=tuple(tuple(region) for region in meta["duplicates"]),
    )


def _load_features(directory, problems):
    try:
        info = _read_json(os.path.join(directory, "feats.json"))
    except (OSError, ValueError) as e:
        problems.append(f"feats.json: {e}")
        return None
    serializer = FeatureMetaSerializer(data=info)
    if not serializer.is_valid():
        problems.extend(_messages(serializer.errors, "feats.json "))
        return None
    info = serializer.validated_data
    values = np.fromfile(os.path.join(directory, "feats.f32"), dtype="<f4")
    n_bins = info["n_bins"]
    count = info.get("frames", values.size // n_bins)
    if values.size != count * n_bins or count < 1:
        problems.append(f"feats_size: feats.f32 holds {values.size} floats, expected {count} x {n_bins}")
        return None
    frames = values.reshape(count, n_bins).astype(np.float32)
    return Spectrogram(frames, info["fps"], info["standardized"])


def load_dataset(directory):
    """
    Loads every piece listed in the manifest (or found under pieces/ when
    there is none). All invalid pieces are reported together.
    """
    manifest_path = os.path.join(directory, MANIFEST)
    pieces_dir = os.path.join(directory, "pieces")
    if os.path.exists(manifest_path):
        manifest = _read_json(manifest_path)
        ids = [entry["id"] for entry in manifest.get("pieces", [])]
        splits = manifest.get("splits", {})
    elif os.path.isdir(pieces_dir):
        ids = sorted(os.listdir(pieces_dir))
        splits = {}
    else:
        raise DatasetValidationError({directory: ["no manifest.json and no pieces/ directory"]})

    pieces, errors = [], {}
    for piece_id in ids:
        try:
            pieces.append(load_piece(os.path.join(pieces_dir, piece_id), piece_id))
        except DatasetValidationError as e:
            errors.update(e.errors)
    if errors:
        for piece_id, messages in errors.items():
            logger.warning(f"Invalid piece {piece_id}: {'; '.join(messages)}")
        raise DatasetValidationError(errors)
    logger.info(f"Loaded {len(pieces)} pieces from {directory}")
    return Dataset(pieces, splits)

