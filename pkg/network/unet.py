"""
FiLM-conditioned U-Net over a single-channel score page.

Encoder blocks are each followed by 2x2 max pooling, decoder blocks are fed by
bilinear upsampling plus a 1x1 convolution concatenated behind the mirrored
encoder output. Every block is conv-LN-ELU-conv-LN-[FiLM]-ELU.
"""

from typing import NamedTuple

import numpy as np

from tensorcore import ops
from tensorcore.exceptions import ContractViolation
from tensorcore.tensor import Tensor

from .layers import FiLMParams, conv_ln, film_apply

MIN_PAGE_SIZE = 16


class PreparedPage(NamedTuple):
    tensor: Tensor  # [1, H', W'], reflect-padded
    height: int
    width: int


def prepare_page(page, config):
    """Reflect-pad a [H, W] or [1, H, W] page in [0, 1] to the pooling multiple."""
    data = page.data if isinstance(page, Tensor) else np.asarray(page)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise ContractViolation(f"page must have a single channel, got {data.shape[0]}")
        data = data[0]
    if data.ndim != 2:
        raise ContractViolation(f"page must be [H, W], got shape {data.shape}")
    height, width = data.shape
    if height < MIN_PAGE_SIZE or width < MIN_PAGE_SIZE:
        raise ContractViolation(f"page must be at least {MIN_PAGE_SIZE}x{MIN_PAGE_SIZE}, got {height}x{width}")
    multiple = config.pad_multiple
    pad_h, pad_w = -height % multiple, -width % multiple
    if pad_h or pad_w:
        data = np.pad(data, ((0, pad_h), (0, pad_w)), mode="reflect")
    return PreparedPage(Tensor(data[None]), height, width)


def _block(x, z, params, config, name):
    x = ops.elu(conv_ln(x, params, f"unet.{name}.conv1", f"unet.{name}.ln1"))
    x = conv_ln(x, params, f"unet.{name}.conv2", f"unet.{name}.ln2")
    if name in config.film_blocks:
        x = film_apply(x, z, FiLMParams.from_params(params, name))
    return ops.elu(x)


def unet_apply(prepared, z, params, config):
    """Forward pass on an already prepared page; returns per-pixel probabilities."""
    x = prepared.tensor
    skips = []
    for index, name in enumerate(config.encoder_blocks):
        x = _block(x, z, params, config, name)
        if index < config.depth - 1:
            skips.append(x)
            x = ops.max_pool2(x)
    for name in config.decoder_blocks:
        skip = skips.pop()
        up = ops.conv2d(ops.bilinear_upsample2(x), params[f"unet.{name}.up.weight"], params[f"unet.{name}.up.bias"])
        up = ops.crop(up, skip.shape[1], skip.shape[2])
        x = _block(ops.concat([skip, up]), z, params, config, name)
    logits = ops.conv2d(x, params["unet.out.weight"], params["unet.out.bias"])
    return ops.crop(ops.sigmoid(logits), prepared.height, prepared.width)


def unet_forward(page, z, params, config):
    return unet_apply(prepare_page(page, config), z, params, config)
