import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import GradientCheckError
from .ops import mul, total
from .tensor import Graph, Tensor, precision

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    name: str
    tol: float
    max_rel_error: float = 0.0  # over coordinates whose absolute error exceeds atol
    max_rel_error_all: float = 0.0  # over every checked coordinate
    checked: int = 0
    # (input index or name, coordinate, analytic, numeric, relative error)
    offending: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.offending

    def summary(self):
        status = "ok" if self.passed else "FAILED"
        text = (
            f"grad check {self.name}: {status}, max relative error "
            f"{self.max_rel_error:.3e} ({self.max_rel_error_all:.3e} unfiltered) over {self.checked} coordinates "
            f"(tol {self.tol:g})"
        )
        if self.offending:
            worst = ", ".join(f"{label}{coord}" for label, coord, *_ in self.offending[:5])
            text += f"; offending: {worst}"
        return text


def grad_check(fn, inputs, step=1e-3, tol=1e-4, atol=1e-7, max_coords=None, seed=0,
               name="op", raise_on_failure=True):
    """
    Compare autodiff gradients of ``fn(*inputs)`` against central finite
    differences in 64-bit mode.

    The output is reduced to a scalar with a fixed random projection. A
    coordinate fails when its relative error |a-n|/(|a|+|n|+1e-12) exceeds
    ``tol`` and its absolute error exceeds ``atol``. Coordinates within ``atol``
    are left out of ``max_rel_error``; ``max_rel_error_all`` covers every
    checked coordinate. ``max_coords`` samples
    that many coordinates per input instead of checking all of them.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, tol=tol)

    with precision(np.float64):
        leaves = [
            Tensor(t.data if isinstance(t, Tensor) else t, name=_label(t, i), requires_grad=True)
            for i, t in enumerate(inputs)
        ]
        first_output = fn(*leaves)
        projection = Tensor(rng.standard_normal(first_output.shape))

        def objective(*args):
            return total(mul(fn(*args), projection))

        with Graph() as graph:
            loss = objective(*leaves)
        grads = graph.backward(loss, leaves)

        for index, leaf in enumerate(leaves):
            analytic = grads.get(leaf)
            coords = _coordinates(leaf.shape, max_coords, rng)
            for coord in coords:
                numeric = _central_difference(objective, leaves, index, coord, step)
                a = float(analytic[coord])
                error = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                report.checked += 1
                report.max_rel_error_all = max(report.max_rel_error_all, error)
                if abs(a - numeric) > atol:
                    report.max_rel_error = max(report.max_rel_error, error)
                    if error > tol:
                        report.offending.append((leaf.name, coord, a, numeric, error))

    logger.debug(report.summary())
    if raise_on_failure and not report.passed:
        raise GradientCheckError(report)
    return report


def _label(value, index):
    if isinstance(value, Tensor) and value.name:
        return value.name
    return f"input{index}"


def _coordinates(shape, max_coords, rng):
    count = int(np.prod(shape))
    flat = np.arange(count)
    if max_coords is not None and count > max_coords:
        flat = np.sort(rng.choice(count, size=max_coords, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def _central_difference(objective, leaves, index, coord, step):
    values = []
    for sign in (1.0, -1.0):
        data = leaves[index].data.copy()
        data[coord] += sign * step
        args = list(leaves)
        args[index] = Tensor(data)
        values.append(objective(*args).item())
    return (values[0] - values[1]) / (2.0 * step)
