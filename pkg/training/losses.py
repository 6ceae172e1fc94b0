import numpy as np
from django.conf import settings

from tensorcore import ops
from tensorcore.exceptions import ContractViolation
from tensorcore.tensor import Tensor, as_tensor


def dice_loss(pred, target, smooth=None):
    """
    Soft Dice loss 1 - (2 sum(p g) + s) / (sum p + sum g + s) between a
    probability mask and its binary target. ``pred`` may carry a leading
    channel axis that the target lacks.
    """
    smooth = settings.PAGETRACK["DICE_SMOOTH"] if smooth is None else smooth
    pred = as_tensor(pred)
    goal = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != goal.shape:
        if pred.size != goal.size or pred.shape[-2:] != goal.shape[-2:]:
            raise ContractViolation(f"dice loss needs equal shapes, got {pred.shape} and {goal.shape}")
        goal = goal.reshape(pred.shape)
    goal = Tensor(goal, dtype=pred.dtype)

    overlap = ops.total(ops.mul(pred, goal))
    denominator = ops.scale(ops.total(pred), 1.0, float(goal.data.sum()) + smooth)
    return ops.scale(ops.divide(ops.scale(overlap, 2.0, smooth), denominator), -1.0, 1.0)
