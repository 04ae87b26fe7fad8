"""
Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Ops in ``autodiff.ops`` build new tensors and,
when gradients are enabled and any input requires them, record the parents and
a backward closure. ``backward`` walks the recorded graph in exact reverse
topological order and accumulates gradients into the leaves.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from cord_lab.exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {
    'f32': np.float32,
    'f64': np.float64,
}

_grad_state = threading.local()


def resolve_dtype(precision):
    """Map a precision tag ('f32' / 'f64') to a numpy dtype"""
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"Unknown precision '{precision}', expected one of {sorted(DTYPES)}") from None


def is_grad_enabled():
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """A node in the autodiff graph"""
    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'op', '_parents', '_backward')

    def __init__(self, data, requires_grad=False, name='', dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward, op):
        """Wrap an op result, recording the graph edge when needed"""
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"Non-finite values produced by op '{op}'")
        track = is_grad_enabled() and any(parent.requires_grad for parent in parents)
        out = cls(data, requires_grad=track)
        out.op = op
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op='{self.op}'{label})"

    # Operator sugar; the ops module owns the maths.
    def __add__(self, other):
        from . import ops
        return ops.add(self, ops.as_tensor(other, like=self))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, ops.as_tensor(other, like=self))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class Graph:
    """Topologically ordered record of the ops reachable from a root"""
    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        leaves = [node for node in order if node.is_leaf and node.requires_grad]
        return cls(nodes=order, leaves=leaves)


def backward(root, graph=None):
    """
    Accumulate d(root)/d(leaf) into every leaf's ``grad``.

    Returns a dict mapping each leaf tensor to the gradient contributed by this
    call. Raises ShapeError for a non-scalar root and NonFiniteError when any
    gradient is NaN/Inf.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    graph = graph or Graph.trace(root)

    pending = {id(root): np.ones_like(root.data)}
    contributed = {}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Non-finite gradient reached op '{node.op}'")
        if node.is_leaf:
            if grad.shape != node.data.shape:
                raise ShapeError(f"Gradient shape {grad.shape} does not match leaf {node.shape}")
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            contributed[node] = grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    return contributed
