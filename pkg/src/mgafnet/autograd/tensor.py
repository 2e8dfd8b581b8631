"""Dense tensor with define-by-run reverse-mode differentiation.

Every op builds its output eagerly and attaches a closure mapping the output
adjoint to input adjoints. ``backward`` linearises the reachable graph into a
:class:`Tape` ordered by execution sequence and replays it in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_seq = itertools.count()


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float64
        self.check_finite = False
        self.grad_enabled = True
        self.kinks = None  # list collecting ReLU sign patterns while a grad check probes


_state = _State()


class NonFiniteError(FloatingPointError):
    """Raised in verification mode when an op produces NaN or Inf."""

    def __init__(self, op):
        super().__init__(f"op '{op}' produced non-finite values")
        self.op = op


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(name):
    """Set the dtype used for newly created tensors ("double" or "single")."""
    dtypes = {"double": np.float64, "single": np.float32}
    if name not in dtypes:
        raise ValueError(f"unknown precision {name!r}; expected 'double' or 'single'")
    prev = _state.dtype
    _state.dtype = dtypes[name]
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def verification():
    """Double precision plus a finiteness check after every op."""
    prev = _state.check_finite
    _state.check_finite = True
    try:
        with precision("double"):
            yield
    finally:
        _state.check_finite = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every ReLU evaluated inside the block."""
    prev = _state.kinks
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = prev


def kink_log():
    return _state.kinks


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled():
    return _state.grad_enabled


class Tensor:
    """N-dimensional array that can take part in gradient recording.

    ``grad`` is allocated for leaf tensors created with ``requires_grad=True``;
    intermediate results carry their adjoint only during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_seq", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _state.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s == 0 for s in arr.shape):
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._seq = next(_seq)

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._seq = next(_seq)
        track = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        if _state.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
        return out

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators, delegated to ops ---------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, ops.reciprocal(other))
        return ops.mul(self, 1.0 / other)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def relu(self):
        from . import ops
        return ops.relu(self)

    def sigmoid(self):
        from . import ops
        return ops.sigmoid(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Execution-ordered record of the ops a scalar depends on."""

    def __init__(self, records):
        self.records = records

    @classmethod
    def record(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.records)

    def ops(self):
        return [t.op for t in self.records]

    def replay(self, root, seed):
        adj = {id(root): seed}
        for node in reversed(self.records):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return
    Tape.record(loss).replay(loss, grad)
