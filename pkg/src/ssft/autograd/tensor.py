"""Tape-free reverse-mode differentiation over numpy arrays.

Every op that touches a tensor with ``requires_grad`` records its parents and a
closure mapping the output gradient to parent gradients. ``backward`` replays
those closures in exact reverse execution order (a global sequence number is
stamped on each node), so fan-out accumulates additively.
"""
import contextlib
import itertools

import numpy as np

_seq = itertools.count()
_recording = [True]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph edges (inference)."""
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # composition helpers, thin wrappers over ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other, self.dtype), ops.neg(self))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward_fn):
    """Wrap an op result; record the graph edge only when a parent needs grad."""
    out = Tensor(data)
    if _recording[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
    else:
        node.grad += g


def backward(loss, grad=None):
    """Populate ``.grad`` on every ``requires_grad`` node reachable from ``loss``."""
    if loss._consumed:
        raise RuntimeError("backward already ran through this graph; rebuild the forward pass first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward without an explicit grad needs a scalar loss")
        grad = np.ones_like(loss.data)

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        stack.extend(p for p in n._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    _accumulate(loss, grad)
    for n in nodes:
        if n._backward is None or n.grad is None:
            continue
        grads = n._backward(n.grad)
        for p, g in zip(n._parents, grads):
            if g is not None and p.requires_grad:
                _accumulate(p, g)
        if n is not loss:
            # interior grads are not part of the contract; release them early
            n.grad = None
        n._backward = None
        n._parents = ()
        n._consumed = True
    loss._consumed = True
