"""
Spectrogram encoders and the conditioner that turns their embeddings into the
FiLM conditioning vector z.
"""

from typing import NamedTuple

import numpy as np

from tensorcore import ops
from tensorcore.exceptions import ContractViolation
from tensorcore.tensor import Tensor, as_tensor

from .layers import conv_ln


class RecurrentState(NamedTuple):
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden_size, dtype=None):
        return cls(Tensor(np.zeros(hidden_size), dtype=dtype), Tensor(np.zeros(hidden_size), dtype=dtype))


def context_window(frames, t, length):
    """
    The ``length`` frames ending at step ``t`` of a [T, bins] array, zero-filled
    before the stream start.
    """
    frames = np.asarray(frames)
    start = t - length + 1
    if start >= 0:
        return frames[start:t + 1]
    window = np.zeros((length, frames.shape[1]), dtype=frames.dtype)
    window[-start:] = frames[:t + 1]
    return window


def _embed(x, params):
    x = ops.dense(x, params["encoder.dense.weight"], params["encoder.dense.bias"])
    x = ops.layer_norm(x, params["encoder.ln_dense.gain"], params["encoder.ln_dense.bias"])
    return ops.elu(x)


def encode_cb(window, params, config):
    """Convolutional encoder over a [context_frames, n_bins] window (time-major)."""
    data = window.data if isinstance(window, Tensor) else np.asarray(window)
    expected = (config.context_frames, config.n_bins)
    if data.shape != expected:
        raise ContractViolation(f"context window must be {expected[0]} frames x {expected[1]} bins, got {data.shape}")
    # bins on the vertical axis, time on the horizontal one
    x = Tensor(data.T[None])
    for stage in range(len(config.encoder_channels)):
        for layer in (1, 2):
            x = ops.elu(conv_ln(x, params, f"encoder.s{stage}.conv{layer}", f"encoder.s{stage}.ln{layer}"))
        x = ops.max_pool2(x)
    x = ops.elu(conv_ln(x, params, "encoder.conv_out", "encoder.ln_out"))
    return _embed(ops.reshape(x, (x.size,)), params)


def encode_fb(frame, params, config):
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if data.shape != (config.n_bins,):
        raise ContractViolation(f"frame must have {config.n_bins} bins, got {data.shape}")
    return _embed(Tensor(data), params)


def encode(frames, t, params, config):
    """Embedding for step ``t`` of a [T, bins] spectrogram, per encoder kind."""
    if config.kind.uses_window:
        return encode_cb(context_window(frames, t, config.context_frames), params, config)
    return encode_fb(np.asarray(frames)[t], params, config)


def condition_step(embedding, state, params, config):
    """
    One conditioner step: an LSTM update for the recurrent encoders (z = h'),
    a stateless dense layer for NTC (state passes through unchanged).
    """
    embedding = as_tensor(embedding)
    if config.kind.recurrent:
        weights = ops.LSTMWeights(params["conditioner.w_ih"], params["conditioner.w_hh"], params["conditioner.bias"])
        h, c = ops.lstm_step(embedding, state.h, state.c, weights)
        return h, RecurrentState(h, c)
    z = ops.dense(embedding, params["conditioner.dense.weight"], params["conditioner.dense.bias"])
    return z, state
