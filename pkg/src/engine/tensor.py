"""Dense arrays with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent; ``Tensor.backward`` walks the graph in reverse
topological order. Training runs in float32; ``precision(np.float64)``
switches newly created tensors to float64 for finite-difference checks.
"""
from contextlib import contextmanager

import numpy as np

from src.utils.errors import GradientError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = False


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def precision(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def set_debug(enabled):
    """Check every forward result for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(enabled)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data, parents, backward, op, allow_inf=False):
    """Wrap an op output, wiring it into the graph when any parent needs grad."""
    out = Tensor(data)
    if _DEBUG and not allow_inf and not np.all(np.isfinite(out.data)):
        raise GradientError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


class Tensor:
    # makes ndarray <op> Tensor defer to the Tensor reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = ''

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op='{self.op}')"

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)
        return make_result(self.data + other.data, (self, other), backward, 'add')

    __radd__ = __add__

    def __neg__(self):
        return make_result(-self.data, (self,), lambda g: (-g,), 'neg')

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)
        return make_result(a * b, (self, other), backward, 'mul')

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)
        return make_result(a / b, (self, other), backward, 'div')

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ShapeError("only constant exponents are supported")
        x = self.data

        def backward(g):
            return (g * exponent * x ** (exponent - 1),)
        return make_result(x ** exponent, (self,), backward, 'pow')

    def __matmul__(self, other):
        from src.engine.ops import matmul
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        from src.engine.ops import matmul
        return matmul(as_tensor(other), self)

    def abs(self):
        x = self.data
        return make_result(np.abs(x), (self,), lambda g: (g * np.sign(x),), 'abs')

    def sqrt(self):
        y = np.sqrt(self.data)
        return make_result(y, (self,), lambda g: (g * 0.5 / y,), 'sqrt')

    def tanh(self):
        y = np.tanh(self.data)
        return make_result(y, (self,), lambda g: (g * (1.0 - y * y),), 'tanh')

    # -- reductions and shape ops ---------------------------------------------------

    def _normalize_axes(self, axis):
        if axis is None:
            return tuple(range(self.ndim))
        axes = axis if isinstance(axis, tuple) else (axis,)
        return tuple(sorted(a % self.ndim for a in axes))

    def sum(self, axis=None, keepdims=False):
        axes = self._normalize_axes(axis)
        shape = self.shape

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)
        return make_result(self.data.sum(axis=axes, keepdims=keepdims), (self,), backward, 'sum')

    def mean(self, axis=None, keepdims=False):
        axes = self._normalize_axes(axis)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return make_result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), 'reshape')

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return make_result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), 'transpose')

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, key):
        shape = self.shape
        dtype = self.data.dtype

        def backward(g):
            grad = np.zeros(shape, dtype=dtype)
            np.add.at(grad, key, g)
            return (grad,)
        return make_result(self.data[key], (self,), backward, 'getitem')

    # -- differentiation ---------------------------------------------------------

    def _topological_order(self):
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    mask = getattr(node, 'trainable_mask', None)
                    if mask is not None:
                        g = g * mask
                    g = np.array(g, dtype=node.data.dtype)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise GradientError(f"{node.op} produced gradient of shape {parent_grad.shape} "
                                        f"for input of shape {parent.shape}")
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


class Parameter(Tensor):
    """A named trainable tensor.

    ``trainable_mask`` (same shape, bool) pins masked-out entries: their
    gradient is always zero and the optimizer never moves them.
    """

    def __init__(self, data, name='', trainable_mask=None):
        super().__init__(data, requires_grad=True)
        self.name = name
        if trainable_mask is not None:
            trainable_mask = np.asarray(trainable_mask, dtype=bool)
            if trainable_mask.shape != self.shape:
                raise ShapeError(f"mask shape {trainable_mask.shape} != parameter shape {self.shape}")
        self.trainable_mask = trainable_mask

    def __repr__(self):
        return f"Parameter(name='{self.name}', shape={self.shape})"
