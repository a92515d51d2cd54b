"""
Reverse-mode autodiff core.

A `Tensor` wraps a numpy array. Ops are `Function` subclasses: `apply` runs the numpy
forward and, when gradients are enabled, links the output back to its inputs. Calling
`loss.backward()` records a `GradTape` (the topologically ordered ops that feed the
loss) and walks it in reverse, accumulating into `.grad` of every leaf that requires it.
"""

import threading
from contextlib import contextmanager

import numpy as np

from utils.errors import GraphError, NumericalError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them. Thread-local, so a prefetch thread can use it safely."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Function:
    """
    Base class for differentiable ops.

    Subclasses implement `forward(*arrays, **kwargs) -> ndarray` and
    `backward(grad) -> tuple` with one entry (ndarray or None) per input tensor.
    Anything backward needs is stashed on `self` during forward.
    """

    def __init__(self, *tensors):
        self.inputs = tensors

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward")

    def backward(self, grad):
        raise NotImplementedError(f"{type(self).__name__} has no backward")

    @classmethod
    def apply(cls, *tensors, **kwargs):
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NumericalError(f"{cls.__name__} produced non-finite values")
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        if not requires_grad:
            func.inputs = ()
            return Tensor(out_data)
        return Tensor(out_data, requires_grad=True, creator=func)


class Tensor:
    """Dense float array that can take part in an autodiff graph."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, creator=None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.creator = creator
        self.grad = None

    # Basic properties

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.creator is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Autodiff

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf on the tape."""
        GradTape.record(self).run()

    # Operators (exact shapes only, scalars allowed)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return F.add(self, other)
        return F.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return F.add(self, F.mul_scalar(other, -1.0))
        return F.add_scalar(self, -other)

    def __rsub__(self, other):
        return F.add_scalar(F.mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return F.elementwise_mul(self, other)
        return F.mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return F.elementwise_mul(self, F.power(other, -1.0))
        return F.mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return F.mul_scalar(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


class GradTape:
    """
    Topologically ordered record of the ops that produced a loss.

    `nodes` holds every tensor reachable from the loss through creators, inputs before
    outputs; `leaves` are those without a creator that require gradients.
    """

    def __init__(self, loss, nodes, leaves):
        self.loss = loss
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def record(cls, loss):
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.creator is None:
            raise GraphError("loss is detached from the graph (no recorded ops)")

        order = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        leaves = [n for n in order if n.creator is None and n.requires_grad]
        return cls(loss, order, leaves)

    def run(self):
        grads = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = node.creator.backward(grad)
            for parent, g in zip(node.creator.inputs, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    g = g.reshape(parent.shape)
                key = id(parent)
                grads[key] = g if key not in grads else grads[key] + g


from engine import functional as F  # noqa: E402
