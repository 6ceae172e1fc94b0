from typing import NamedTuple

from tensorcore import ops
from tensorcore.exceptions import ConfigurationError
from tensorcore.tensor import as_tensor


class FiLMParams(NamedTuple):
    weight_s: object  # [K, hidden]
    bias_s: object
    weight_t: object
    bias_t: object

    @property
    def channels(self):
        return self.weight_s.shape[0]

    @classmethod
    def from_params(cls, params, block):
        prefix = f"unet.{block}.film"
        return cls(
            params[f"{prefix}.scale.weight"],
            params[f"{prefix}.scale.bias"],
            params[f"{prefix}.shift.weight"],
            params[f"{prefix}.shift.bias"],
        )


def film_apply(x, z, film):
    """Feature-wise affine modulation s(z) * x + t(z) with s = 1 + dense_s(z)."""
    x = as_tensor(x)
    if film.channels != x.shape[0] or film.weight_t.shape[0] != x.shape[0]:
        raise ConfigurationError(f"FiLM layer produces {film.channels} channels, feature map has {x.shape[0]}")
    scale_ = ops.scale(ops.dense(z, film.weight_s, film.bias_s), 1.0, 1.0)
    shift = ops.dense(z, film.weight_t, film.bias_t)
    return ops.channel_affine(x, scale_, shift)


def conv_ln(x, params, conv, norm, eps=ops.LAYER_NORM_EPS):
    """3x3 'same' convolution followed by layer normalization."""
    weight = params[f"{conv}.weight"]
    out = ops.conv2d(x, weight, params[f"{conv}.bias"], pad=weight.shape[-1] // 2)
    return ops.layer_norm(out, params[f"{norm}.gain"], params[f"{norm}.bias"], eps)
