"""Adam with L2 weight decay folded into the gradient, and a plateau schedule."""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()},
            {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()},
        )


def adam_step(params, grads, state, lr, weight_decay=0.0):
    """
    One update of every parameter; missing gradients count as zero. Returns
    the new parameters and the (mutated) state.
    """
    state.step += 1
    correction1 = 1.0 - BETA1**state.step
    correction2 = 1.0 - BETA2**state.step
    updated = {}
    for name, tensor in params.items():
        value = tensor.data.astype(np.float64)
        grad = grads.get(name)
        grad = np.zeros_like(value) if grad is None else np.asarray(grad, dtype=np.float64)
        if weight_decay:
            grad = grad + weight_decay * value
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= BETA1
        m += (1.0 - BETA1) * grad
        v *= BETA2
        v += (1.0 - BETA2) * grad * grad
        updated[name] = value - lr * (m / correction1) / (np.sqrt(v / correction2) + EPSILON)
    return params.replace(updated), state


class PlateauSchedule:
    """
    Halves the learning rate after ``lr_patience`` epochs without improvement
    of the validation loss and asks to stop after ``stop_patience`` of them.
    An epoch improves when it beats the best loss by at least ``min_improvement``.
    """

    def __init__(self, lr, lr_patience, stop_patience, min_improvement=0.0, factor=0.5):
        self.lr = lr
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.min_improvement = min_improvement
        self.factor = factor
        self.best = np.inf
        self.best_epoch = None
        self.bad_epochs = 0
        self._since_reduction = 0

    def step(self, epoch, loss):
        """Record an epoch's validation loss; True when it is a new best."""
        if loss < self.best - self.min_improvement:
            self.best, self.best_epoch = loss, epoch
            self.bad_epochs = 0
            self._since_reduction = 0
            return True
        self.bad_epochs += 1
        self._since_reduction += 1
        if self._since_reduction >= self.lr_patience:
            self.lr *= self.factor
            self._since_reduction = 0
            logger.info(f"No improvement for {self.lr_patience} epochs, learning rate now {self.lr:.3g}")
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.stop_patience
