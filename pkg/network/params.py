"""
Parameter layout of the audio-conditioned U-Net and its initialization.

Weights are initialized orthogonally, biases and FiLM projections with zeros
and layer-norm gains with ones, so FiLM starts out as the identity.
"""

import logging
from collections import OrderedDict
from collections.abc import Mapping

import numpy as np

from tensorcore.exceptions import ConfigurationError
from tensorcore.tensor import Tensor

logger = logging.getLogger(__name__)

WEIGHT, BIAS, GAIN, ZERO = "weight", "bias", "gain", "zero"


class ModelParams(Mapping):
    """Ordered, immutable collection of named trainable tensors."""

    def __init__(self, tensors):
        self._tensors = OrderedDict()
        for name, value in tensors.items() if isinstance(tensors, Mapping) else tensors:
            tensor = value if isinstance(value, Tensor) else Tensor(value)
            if tensor.name != name or not tensor.requires_grad:
                tensor = Tensor(tensor.data, name=name, requires_grad=True, dtype=tensor.dtype)
            self._tensors[name] = tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def tensors(self):
        return list(self._tensors.values())

    def astype(self, dtype):
        return ModelParams((name, t.astype(dtype)) for name, t in self._tensors.items())

    def replace(self, arrays):
        """New collection with the given arrays swapped in (same names)."""
        updated = OrderedDict(self._tensors)
        for name, array in arrays.items():
            if name not in updated:
                raise ConfigurationError(f"unknown parameter {name!r}")
            if np.shape(array) != updated[name].shape:
                raise ConfigurationError(f"parameter {name!r} keeps shape {updated[name].shape}, got {np.shape(array)}")
            updated[name] = Tensor(array, name=name, requires_grad=True, dtype=updated[name].dtype)
        return ModelParams(updated)

    def count(self):
        return sum(t.size for t in self._tensors.values())


def parameter_specs(config):
    """(name, shape, init kind) for every tensor of the model, in a fixed order."""
    specs = []

    def conv(prefix, c_out, c_in, size):
        specs.append((f"{prefix}.weight", (c_out, c_in, size, size), WEIGHT))
        specs.append((f"{prefix}.bias", (c_out,), BIAS))

    def norm(prefix, channels):
        specs.append((f"{prefix}.gain", (channels,), GAIN))
        specs.append((f"{prefix}.bias", (channels,), BIAS))

    def dense(prefix, n_out, n_in, kind=WEIGHT):
        specs.append((f"{prefix}.weight", (n_out, n_in), kind))
        specs.append((f"{prefix}.bias", (n_out,), BIAS))

    # spectrogram encoder
    if config.kind.uses_window:
        c_in = 1
        for stage, channels in enumerate(config.encoder_channels):
            for layer in (1, 2):
                conv(f"encoder.s{stage}.conv{layer}", channels, c_in, 3)
                norm(f"encoder.s{stage}.ln{layer}", channels)
                c_in = channels
        conv("encoder.conv_out", c_in, c_in, 1)
        norm("encoder.ln_out", c_in)
        bins, frames = config.encoder_output_shape()
        dense("encoder.dense", config.embedding_size, c_in * bins * frames)
    else:
        dense("encoder.dense", config.embedding_size, config.n_bins)
    norm("encoder.ln_dense", config.embedding_size)

    # conditioner
    hidden = config.hidden_size
    if config.kind.recurrent:
        specs.append(("conditioner.w_ih", (4 * hidden, config.embedding_size), WEIGHT))
        specs.append(("conditioner.w_hh", (4 * hidden, hidden), WEIGHT))
        specs.append(("conditioner.bias", (4 * hidden,), BIAS))
    else:
        dense("conditioner.dense", hidden, config.embedding_size)

    # U-Net
    c_in = 1
    for name in config.encoder_blocks:
        width = config.block_width(name)
        _block_specs(specs, config, name, c_in, width, conv, norm, dense)
        c_in = width
    for index, name in enumerate(config.decoder_blocks):
        width = config.block_width(name)
        skip = config.block_width(config.encoder_blocks[-2 - index])
        conv(f"unet.{name}.up", width, c_in, 1)
        _block_specs(specs, config, name, width + skip, width, conv, norm, dense)
        c_in = width
    conv("unet.out", 1, c_in, 1)
    return specs


def _block_specs(specs, config, name, c_in, width, conv, norm, dense):
    conv(f"unet.{name}.conv1", width, c_in, 3)
    norm(f"unet.{name}.ln1", width)
    conv(f"unet.{name}.conv2", width, width, 3)
    norm(f"unet.{name}.ln2", width)
    if name in config.film_blocks:
        dense(f"unet.{name}.film.scale", width, config.hidden_size, kind=ZERO)
        dense(f"unet.{name}.film.shift", width, config.hidden_size, kind=ZERO)


def orthogonal(shape, rng):
    """
    Orthogonal matrix for a weight reshaped to [out, in*f*f]: orthonormal rows
    when out <= in, orthonormal columns otherwise.
    """
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    draw = rng.standard_normal((rows, cols))
    u, _, vt = np.linalg.svd(draw, full_matrices=False)
    q = u if u.shape == (rows, cols) else vt
    return q.reshape(shape)


def init_params(config, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape, kind in parameter_specs(config):
        if kind == WEIGHT:
            value = orthogonal(shape, rng)
        elif kind == GAIN:
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value, name=name, requires_grad=True, dtype=dtype)
    params = ModelParams(tensors)
    logger.info(f"Initialized {config.encoder_kind} model with {params.count()} parameters (seed {seed})")
    return params
