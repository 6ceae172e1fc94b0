"""
Model container:

    b"PGTK" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
    | float32 little-endian payload | u64 FNV-1a checksum of the payload

The metadata holds the architecture config, the tensor manifest
(name, shape, offset in floats) and the spectrogram normalization stats.
"""

import json
import logging
import os
import struct

import numba
import numpy as np

from dsp.processing import NormStats
from tensorcore.exceptions import ConfigurationError, PagetrackError

from .config import ModelConfig
from .params import ModelParams, parameter_specs

logger = logging.getLogger(__name__)

MAGIC = b"PGTK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_CHECKSUM = struct.Struct("<Q")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_OFFSET_U64, _PRIME_U64 = np.uint64(FNV_OFFSET), np.uint64(FNV_PRIME)


class ModelFormatError(PagetrackError):
    """Unreadable, truncated or corrupted model container"""


@numba.njit(cache=True)
def _fnv1a_64_bytes(data):
    digest = _OFFSET_U64
    for byte in data:
        digest = (digest ^ np.uint64(byte)) * _PRIME_U64
    return digest


def fnv1a_64(data):
    """64-bit FNV-1a of a bytes-like object; uint64 arithmetic wraps modulo 2**64."""
    return int(_fnv1a_64_bytes(np.frombuffer(data, dtype=np.uint8)))


def save_model(params, config, stats, path):
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in params.items():
        values = np.ascontiguousarray(tensor.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(values.shape), "offset": offset})
        offset += values.size
        chunks.append(values.tobytes())
    payload = b"".join(chunks)
    metadata = json.dumps(
        {
            "config": config.to_dict(),
            "manifest": manifest,
            "norm_stats": stats.to_dict() if stats is not None else None,
        },
        sort_keys=True,
    ).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(metadata)))
        f.write(metadata)
        f.write(payload)
        f.write(_CHECKSUM.pack(fnv1a_64(payload)))
    logger.info(f"Saved model with {len(manifest)} tensors ({offset} floats) to {path}")


def load_model(path):
    """Returns (params, config, stats); stats is None when none were stored."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ModelFormatError(f"{path}: {e}") from e

    if len(blob) < _HEADER.size + _CHECKSUM.size:
        raise ModelFormatError(f"{path}: truncated header")
    magic, version, meta_length = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")

    meta_end = _HEADER.size + meta_length
    if meta_end + _CHECKSUM.size > len(blob):
        raise ModelFormatError(f"{path}: truncated metadata")
    try:
        metadata = json.loads(blob[_HEADER.size:meta_end].decode("utf-8"))
        manifest = metadata["manifest"]
        config = ModelConfig.from_dict(metadata["config"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, ConfigurationError) as e:
        raise ModelFormatError(f"{path}: unreadable metadata ({e})") from e

    expected_floats = sum(int(np.prod(entry["shape"])) for entry in manifest)
    payload = blob[meta_end:-_CHECKSUM.size]
    if len(payload) != 4 * expected_floats:
        raise ModelFormatError(
            f"{path}: payload holds {len(payload)} bytes, manifest needs {4 * expected_floats}"
        )
    (stored,) = _CHECKSUM.unpack_from(blob, len(blob) - _CHECKSUM.size)
    if fnv1a_64(payload) != stored:
        raise ModelFormatError(f"{path}: checksum mismatch")

    values = np.frombuffer(payload, dtype="<f4")
    tensors = []
    for entry in manifest:
        count = int(np.prod(entry["shape"]))
        start = entry["offset"]
        array = values[start:start + count].astype(np.float32).reshape(entry["shape"])
        tensors.append((entry["name"], array))
    params = ModelParams(tensors)
    layout = [(name, tuple(shape)) for name, shape, _ in parameter_specs(config)]
    if layout != [(name, t.shape) for name, t in params.items()]:
        raise ModelFormatError(f"{path}: tensor manifest does not match the stored architecture")

    stats = metadata.get("norm_stats")
    stats = NormStats.from_dict(stats) if stats is not None else None
    logger.debug(f"Loaded {len(params)} tensors from {path}")
    return params, config, stats
