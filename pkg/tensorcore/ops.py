"""
Differentiable primitives used by the encoders, the conditioner and the U-Net.

All spatial tensors are single samples laid out as [C, H, W]. Convolution is
cross-correlation; bilinear upsampling uses half-pixel centers.
"""

from functools import lru_cache
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .choices import Activation
from .exceptions import ConfigurationError, ContractViolation
from .tensor import as_tensor, record

LAYER_NORM_EPS = 1e-5


# --- elementwise and structural ---------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return record("mul", (a, b), a.data * b.data, backward)


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("divide", a, b)

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return record("divide", (a, b), a.data / b.data, backward)


def scale(x, factor, offset=0.0):
    """factor * x + offset with constant factor and offset."""
    x = as_tensor(x)
    out = x.data * x.data.dtype.type(factor) + x.data.dtype.type(offset)
    return record("scale", (x,), out, lambda g: (g * factor,))


def total(x):
    """Sum of all elements as a one-element tensor."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1)
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g.reshape(()), x.shape),))


def reshape(x, shape):
    x = as_tensor(x)
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def take(x, start, stop):
    """Slice ``x[start:stop]`` along the first axis."""
    x = as_tensor(x)

    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[start:stop] = g
        return (grad,)

    return record("take", (x,), x.data[start:stop], backward)


def concat(tensors):
    """Concatenate along the channel (first) axis."""
    tensors = tuple(as_tensor(t) for t in tensors)
    spatial = {t.shape[1:] for t in tensors}
    if len(spatial) != 1:
        raise ConfigurationError(f"concat needs equal trailing shapes, got {sorted(spatial)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat", tensors, np.concatenate([t.data for t in tensors]), backward)


def crop(x, height, width):
    """Keep the top-left ``height`` x ``width`` window of a [C, H, W] tensor."""
    x = as_tensor(x)
    if x.shape[1] == height and x.shape[2] == width:
        return x
    if x.shape[1] < height or x.shape[2] < width:
        raise ConfigurationError(f"cannot crop {x.shape} to {height}x{width}")

    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[:, :height, :width] = g
        return (grad,)

    return record("crop", (x,), x.data[:, :height, :width], backward)


# --- layers ------------------------------------------------------------------


def _im2col(padded, size, stride):
    windows = sliding_window_view(padded, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    channels, out_h, out_w = windows.shape[:3]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(channels * size * size, out_h * out_w)
    return cols, out_h, out_w


def _col2im(cols, padded_shape, size, stride, out_h, out_w):
    channels = padded_shape[0]
    cols = cols.reshape(channels, size, size, out_h, out_w)
    grad = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(size):
        for j in range(size):
            grad[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, i, j]
    return grad


def conv2d(x, kernel, bias, pad=0, stride=1):
    """
    Cross-correlation of a [C_in, H, W] input with [C_out, C_in, f, f] kernels.
    Output size is floor((H + 2*pad - f) / stride) + 1 per spatial axis.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects [C,H,W] and [O,C,f,f], got {x.shape} and {kernel.shape}")
    c_in, height, width = x.shape
    c_out, k_in, size, size_w = kernel.shape
    if k_in != c_in:
        raise ConfigurationError(f"conv2d input has {c_in} channels, kernel expects {k_in}")
    if size != size_w:
        raise ConfigurationError(f"conv2d kernels must be square, got {size}x{size_w}")
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or pad < 0 or height + 2 * pad < size or width + 2 * pad < size:
        raise ConfigurationError(f"conv2d cannot apply f={size} pad={pad} stride={stride} to {height}x{width}")

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, out_h, out_w = _im2col(padded, size, stride)
    weights = kernel.data.reshape(c_out, -1)
    out = (weights @ cols).reshape(c_out, out_h, out_w) + bias.data[:, None, None]

    def backward(g):
        flat = g.reshape(c_out, -1)
        # columns are rebuilt instead of kept alive between passes
        cols, _, _ = _im2col(padded, size, stride)
        grad_kernel = (flat @ cols.T).reshape(kernel.shape)
        grad_padded = _col2im(weights.T @ flat, padded.shape, size, stride, out_h, out_w)
        grad_x = grad_padded[:, pad:pad + height, pad:pad + width] if pad else grad_padded
        return grad_x, grad_kernel, g.sum(axis=(1, 2))

    return record("conv2d", (x, kernel, bias), out, backward)


def matvec(weight, x):
    weight, x = as_tensor(weight), as_tensor(x)
    if weight.data.ndim != 2 or x.data.ndim != 1 or weight.shape[1] != x.shape[0]:
        raise ConfigurationError(f"matvec cannot multiply {weight.shape} by {x.shape}")

    def backward(g):
        return np.outer(g, x.data), weight.data.T @ g

    return record("matvec", (weight, x), weight.data @ x.data, backward)


def dense(x, weight, bias):
    """weight @ x + bias for a vector input."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ConfigurationError(f"dense cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"dense bias must have shape ({weight.shape[0]},), got {bias.shape}")

    def backward(g):
        return weight.data.T @ g, np.outer(g, x.data), g

    return record("dense", (x, weight, bias), weight.data @ x.data + bias.data, backward)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """
    Normalize one sample over all of its axes; gain and bias are per channel
    for [C, H, W] features and per element for vectors.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[0],) or bias.shape != (x.shape[0],):
        raise ConfigurationError(f"layer_norm parameters {gain.shape}/{bias.shape} do not match input {x.shape}")
    expand = (slice(None),) + (None,) * (x.data.ndim - 1)
    reduce_axes = tuple(range(1, x.data.ndim))

    mean = x.data.mean()
    inv_std = 1.0 / np.sqrt(x.data.var() + eps)
    normed = (x.data - mean) * inv_std
    out = gain.data[expand] * normed + bias.data[expand]

    def backward(g):
        grad_normed = g * gain.data[expand]
        n = x.size
        grad_x = inv_std / n * (
            n * grad_normed - grad_normed.sum() - normed * (grad_normed * normed).sum()
        )
        if reduce_axes:
            return grad_x, (g * normed).sum(axis=reduce_axes), g.sum(axis=reduce_axes)
        return grad_x, g * normed, g

    return record("layer_norm", (x, gain, bias), out.astype(x.dtype, copy=False), backward)


def activation(kind, x):
    x = as_tensor(x)
    kind = Activation(kind)
    if kind == Activation.ELU:
        out = np.expm1(np.minimum(x.data, 0)) + np.maximum(x.data, 0)

        def backward(g):
            return (g * np.where(x.data > 0, 1.0, out + 1.0).astype(g.dtype),)

    elif kind == Activation.SIGMOID:
        out = expit(x.data)

        def backward(g):
            return (g * out * (1.0 - out),)

    else:
        out = np.tanh(x.data)

        def backward(g):
            return (g * (1.0 - out * out),)

    return record(kind.value, (x,), out, backward)


def elu(x):
    return activation(Activation.ELU, x)


def sigmoid(x):
    return activation(Activation.SIGMOID, x)


def tanh(x):
    return activation(Activation.TANH, x)


def max_pool2(x):
    """Non-overlapping 2x2 max pooling; a trailing odd row or column is dropped."""
    x = as_tensor(x)
    channels, height, width = x.shape
    if height < 2 or width < 2:
        raise ConfigurationError(f"max_pool2 needs at least 2x2 input, got {height}x{width}")
    out_h, out_w = height // 2, width // 2
    blocks = (
        x.data[:, :2 * out_h, :2 * out_w]
        .reshape(channels, out_h, 2, out_w, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(channels, out_h, out_w, 4)
    )
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward(g):
        grad_blocks = np.zeros((channels, out_h, out_w, 4), dtype=g.dtype)
        np.put_along_axis(grad_blocks, winner, g[..., None], axis=-1)
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[:, :2 * out_h, :2 * out_w] = (
            grad_blocks.reshape(channels, out_h, out_w, 2, 2)
            .transpose(0, 1, 3, 2, 4)
            .reshape(channels, 2 * out_h, 2 * out_w)
        )
        return (grad,)

    return record("max_pool2", (x,), out, backward)


@lru_cache(maxsize=64)
def _upsample_matrix(size, dtype):
    # output i samples input coordinate i/2 - 0.25, clamped to [0, size - 1]
    matrix = np.zeros((2 * size, size), dtype=np.float64)
    for i in range(2 * size):
        source = min(max(i / 2.0 - 0.25, 0.0), size - 1.0)
        lower = int(np.floor(source))
        upper = min(lower + 1, size - 1)
        frac = source - lower
        matrix[i, lower] += 1.0 - frac
        matrix[i, upper] += frac
    matrix = matrix.astype(dtype)
    matrix.flags.writeable = False
    return matrix


def bilinear_upsample2(x):
    """Double height and width with half-pixel-center bilinear interpolation."""
    x = as_tensor(x)
    _, height, width = x.shape
    rows = _upsample_matrix(height, x.dtype)
    cols = _upsample_matrix(width, x.dtype)
    out = (rows @ x.data) @ cols.T

    def backward(g):
        return (rows.T @ (g @ cols),)

    return record("bilinear_upsample2", (x,), out, backward)


def channel_affine(x, scale_, shift):
    """out[k] = scale_[k] * x[k] + shift[k] for a [K, H, W] input."""
    x, scale_, shift = as_tensor(x), as_tensor(scale_), as_tensor(shift)
    channels = x.shape[0]
    if scale_.shape != (channels,) or shift.shape != (channels,):
        raise ConfigurationError(
            f"channel_affine expects ({channels},) scale and shift, got {scale_.shape} and {shift.shape}"
        )
    out = scale_.data[:, None, None] * x.data + shift.data[:, None, None]

    def backward(g):
        return g * scale_.data[:, None, None], (g * x.data).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return record("channel_affine", (x, scale_, shift), out, backward)


# --- recurrent cell ----------------------------------------------------------


class LSTMWeights(NamedTuple):
    w_ih: object
    w_hh: object
    bias: object


def lstm_step(x, h, c, weights):
    """
    One LSTM cell step. Gate rows are stacked as input, forget, candidate,
    output: c' = f*c + i*g, h' = o*tanh(c').
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w_ih, w_hh, bias = (as_tensor(w) for w in weights)
    units = h.shape[0]
    if w_ih.shape != (4 * units, x.shape[0]) or w_hh.shape != (4 * units, units):
        raise ConfigurationError(
            f"lstm weights {w_ih.shape}/{w_hh.shape} do not fit input {x.shape} and state {h.shape}"
        )
    if c.shape != h.shape:
        raise ContractViolation(f"lstm cell state {c.shape} does not match hidden state {h.shape}")

    gates = add(dense(x, w_ih, bias), matvec(w_hh, h))
    in_gate = sigmoid(take(gates, 0, units))
    forget_gate = sigmoid(take(gates, units, 2 * units))
    candidate = tanh(take(gates, 2 * units, 3 * units))
    out_gate = sigmoid(take(gates, 3 * units, 4 * units))

    c_next = add(mul(forget_gate, c), mul(in_gate, candidate))
    h_next = mul(out_gate, tanh(c_next))
    return h_next, c_next


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")
