"""Define-by-run reverse-mode differentiation over numpy arrays.

Every primitive registers three pieces: static shape inference, a forward
kernel that returns ``(output, saved)``, and a backward kernel mapping the
output cotangent and ``saved`` to one cotangent per input (``None`` for inputs
that are not differentiable).
"""

import contextlib
import itertools

import numpy as np

from ..errors import ShapeError, StateError

_ids = itertools.count()
_state = {"grad": True}

PRIMITIVES = {}


class Primitive:
    name = None
    # indices of inputs that never receive gradient (masks, indices, ...)
    nondiff = ()

    def infer(self, *shapes, **attrs):
        raise NotImplementedError

    def forward(self, *xs, **attrs):
        raise NotImplementedError

    def backward(self, saved, g, **attrs):
        raise NotImplementedError


def register(cls):
    PRIMITIVES[cls.name] = cls()
    return cls


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


class Node:
    __slots__ = ("id", "op", "inputs", "attrs", "saved", "shape", "freed")

    def __init__(self, op, inputs, attrs, saved, shape):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.saved = saved
        self.shape = shape
        self.freed = False

    def __repr__(self):
        return f"Node#{self.id}({self.op.name}, shape={self.shape})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None, retain_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise StateError("backward() on a tensor that is not part of a differentiable graph")
        if grad is None:
            if self.size != 1:
                raise StateError("backward() without output_grad requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"output_grad shape {grad.shape} does not match output {self.shape}")

        order = _topo(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            if node is None:
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad += g
                continue
            if node.freed:
                raise StateError(f"{node!r}: graph already consumed by a previous backward()")
            in_grads = node.op.backward(node.saved, g, **node.attrs)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node!r}: backward produced {gi.shape} for input of shape {inp.shape}")
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
            if not retain_graph:
                node.saved = None
                node.freed = True

    # operator sugar; all routes go through registered primitives
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scale", self, c=float(other))
        return apply("mul", self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return apply("scale", self, c=float(other))
        return apply("mul", other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply("scale", self, c=1.0 / float(other))
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __getitem__(self, index):
        return apply("slice", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("permute", self, axes=tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype.kind in "fcbiu":
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _reference_dtype(inputs):
    for x in inputs:
        if isinstance(x, Tensor):
            return x.dtype
    return None


def apply(name, *inputs, **attrs):
    """Run primitive ``name`` on ``inputs`` and record it on the tape if needed."""
    op = PRIMITIVES[name]
    dtype = _reference_dtype(inputs)
    ts = []
    for i, x in enumerate(inputs):
        # non-differentiable inputs (indices, masks) keep their own dtype
        ts.append(x if isinstance(x, Tensor) else as_tensor(x, None if i in op.nondiff else dtype))
    try:
        shape = tuple(op.infer(*[t.shape for t in ts], **attrs))
    except ShapeError as exc:
        raise ShapeError(f"{name} node: {exc}") from None
    out, saved = op.forward(*[t.data for t in ts], **attrs)
    if out.shape != shape:
        raise ShapeError(f"{name} node: inferred shape {shape} but kernel produced {out.shape}")
    needs = _state["grad"] and any(t.requires_grad for i, t in enumerate(ts) if i not in op.nondiff)
    result = Tensor(out, requires_grad=needs)
    if needs:
        result.node = Node(op, tuple(ts), attrs, saved, shape)
    return result


def infer_shape(name, *shapes, **attrs):
    """Static shape inference for primitive ``name`` without running it."""
    return tuple(PRIMITIVES[name].infer(*shapes, **attrs))


class Graph:
    """A re-runnable define-by-run program.

    ``fn(*inputs, params)`` builds the tape on every :meth:`forward`; the tape
    of the latest run is what :meth:`backward` traverses.
    """

    def __init__(self, fn):
        self.fn = fn
        self.outputs = None
        self.inputs = None

    def forward(self, inputs, params=None, requires_grad=False):
        ts = tuple(
            x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad) for x in inputs
        )
        self.inputs = ts
        self.outputs = self.fn(*ts) if params is None else self.fn(*ts, params)
        return self.outputs

    def backward(self, output_grad=None):
        if self.outputs is None:
            raise StateError("backward() called before forward()")
        out = self.outputs
        out.backward(output_grad)
        self.outputs = None
        return [t.grad for t in self.inputs]
