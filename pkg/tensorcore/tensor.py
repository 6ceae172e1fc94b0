"""
Dense tensors and a tape-based reverse-mode autodiff graph.

Operations only record onto a graph while one is active (``with Graph() as g``);
outside a graph they just compute, which is the inference path used by the
tracker. The active graph and the compute precision are context variables, so
independent graphs can live on independent threads.
"""

import contextvars
import logging
from contextlib import contextmanager

import numpy as np

from .exceptions import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

_PRECISION = contextvars.ContextVar("pagetrack_precision", default=np.float32)
_ACTIVE_GRAPH = contextvars.ContextVar("pagetrack_graph", default=None)

# op name -> factor applied to that op's input gradients (debug hook for verify)
_GRADIENT_FAULTS = {}


def default_dtype():
    return _PRECISION.get()


@contextmanager
def precision(dtype):
    """Switch the dtype used for newly created tensors (float64 for grad checks)."""
    token = _PRECISION.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _PRECISION.reset(token)


@contextmanager
def inject_gradient_fault(op, factor=1.5):
    """Scale the gradients produced by ``op`` so a grad check must fail."""
    _GRADIENT_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRADIENT_FAULTS.pop(op, None)


def active_graph():
    return _ACTIVE_GRAPH.get()


class Tensor:
    """Immutable n-d array, optionally a named trainable leaf."""

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name=None, requires_grad=False, dtype=None):
        array = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if array.ndim == 0:
            array = array.reshape(1)
        if any(size < 1 for size in array.shape):
            raise ConfigurationError(f"Tensor dimensions must be >= 1, got {array.shape}")
        array.flags.writeable = False
        self.data = array
        self.name = name
        self.requires_grad = requires_grad

    @classmethod
    def wrap(cls, array, requires_grad=False):
        # Takes ownership of a freshly computed array without copying it.
        out = cls.__new__(cls)
        array = np.asarray(array)
        if array.ndim == 0:
            array = array.reshape(1)
        array.flags.writeable = False
        out.data = array
        out.name = None
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Same values, cut out of the graph."""
        return Tensor.wrap(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data, name=self.name, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Node:
    __slots__ = ("id", "op", "inputs", "output", "backward")

    def __init__(self, node_id, op, inputs, output, backward):
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Gradients:
    """Gradients of one backward pass, looked up by tensor or by name."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def get(self, tensor):
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        return grad

    def __getitem__(self, tensor):
        return self.get(tensor)

    def by_name(self):
        return {
            tensor.name: self.get(tensor)
            for tensor in self._tensors
            if tensor.name is not None
        }


class Graph:
    """Records operations in execution order; that order is topological."""

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward):
        node = Node(len(self.nodes), op, inputs, output, backward)
        self.nodes.append(node)
        return node

    def backward(self, loss, params=()):
        """Gradients of a scalar ``loss`` with respect to every reachable leaf."""
        if loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        return self.backward_from([(loss, np.ones(loss.shape, dtype=loss.dtype))], params)

    def backward_from(self, seeds, params=()):
        """
        Backpropagate explicit output gradients. ``seeds`` is a list of
        (tensor, gradient) pairs; used to chain separately recorded graphs.
        """
        grads = {}
        leaves = {}
        for tensor, grad in seeds:
            _accumulate(grads, tensor, np.asarray(grad, dtype=tensor.dtype))

        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            # intermediate gradients are not needed once consumed
            del grads[id(node.output)]
            input_grads = node.backward(upstream)
            factor = _GRADIENT_FAULTS.get(node.op)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if factor is not None:
                    grad = grad * factor
                _accumulate(grads, tensor, grad)
                leaves[id(tensor)] = tensor

        # whatever remains belongs to leaves (or to seeds that are leaves)
        for tensor, _ in seeds:
            leaves.setdefault(id(tensor), tensor)
        tensors = list(params) + [t for t in leaves.values() if t not in params]
        return Gradients(grads, tensors)


def _accumulate(grads, tensor, grad):
    current = grads.get(id(tensor))
    if current is None:
        grads[id(tensor)] = np.array(grad, dtype=tensor.dtype, copy=True).reshape(tensor.shape)
    else:
        current += grad.reshape(tensor.shape)


def record(op, inputs, output, backward_fn):
    """
    Wrap ``output`` as a tensor and record it when a graph is active and any
    input takes part in differentiation.
    """
    graph = _ACTIVE_GRAPH.get()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(output, requires_grad=tracked)
    if tracked:
        graph.record(op, inputs, out, backward_fn)
    return out
