"""
Differentiable ops over Tensors.

The op set is deliberately small: exactly what the policy model and the four
training losses need. There is no general broadcasting; shape contracts are
checked up front and violations raise ShapeError.
"""
import numpy as np

from cord_lab.exceptions import ShapeError

from .tensor import Tensor

GELU_C = float(np.sqrt(2.0 / np.pi))


def as_tensor(value, like=None):
    """Wrap constants as non-differentiable tensors in the dtype of ``like``"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _ndim(op, x, ndim):
    if x.data.ndim != ndim:
        raise ShapeError(f"{op}: expected a {ndim}-d tensor, got shape {x.shape}")


def add(a, b):
    _same_shape('add', a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), 'add')


def sub(a, b):
    _same_shape('sub', a, b)
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), 'sub')


def mul(a, b):
    _same_shape('mul', a, b)
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), 'mul')


def scale(a, factor):
    factor = a.dtype.type(factor)
    return Tensor.from_op(a.data * factor, (a,), lambda g: (g * factor,), 'scale')


def add_bias(x, bias):
    """Add a vector to every row of x"""
    _ndim('add_bias', bias, 1)
    if x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: last dim {x.shape[-1]} vs bias {bias.shape[0]}")

    def _backward(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return Tensor.from_op(x.data + bias.data, (x, bias), _backward, 'add_bias')


def matmul(a, b):
    _ndim('matmul', a, 2)
    _ndim('matmul', b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), _backward, 'matmul')


def transpose(a):
    _ndim('transpose', a, 2)
    return Tensor.from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), 'transpose')


def gather_rows(table, indices):
    """Embedding lookup: rows of ``table`` at ``indices``"""
    _ndim('gather_rows', table, 2)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return Tensor.from_op(table.data[indices], (table,), _backward, 'gather_rows')


def pick(x, indices):
    """Element ``indices[t]`` of every row t"""
    _ndim('pick', x, 2)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.shape[0] != x.shape[0]:
        raise ShapeError(f"pick: {indices.shape[0]} indices for {x.shape[0]} rows")
    positions = np.arange(x.shape[0])

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[positions, indices] = g
        return (grad,)

    return Tensor.from_op(x.data[positions, indices], (x,), _backward, 'pick')


def rows(x, start, stop):
    """Row slice x[start:stop]"""
    _ndim('rows', x, 2)

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[start:stop] = g
        return (grad,)

    return Tensor.from_op(x.data[start:stop].copy(), (x,), _backward, 'rows')


def columns(x, start, stop):
    """Column slice x[:, start:stop]"""
    _ndim('columns', x, 2)

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return Tensor.from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), _backward, 'columns')


def concat_rows(parts):
    for part in parts:
        _ndim('concat_rows', part, 2)
    bounds = np.cumsum([0] + [part.shape[0] for part in parts])

    def _backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), _backward, 'concat_rows')


def concat_columns(parts):
    for part in parts:
        _ndim('concat_columns', part, 2)
    bounds = np.cumsum([0] + [part.shape[1] for part in parts])

    def _backward(g):
        return tuple(np.ascontiguousarray(g[:, bounds[i]:bounds[i + 1]]) for i in range(len(parts)))

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), _backward, 'concat_columns')


def exp(x):
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), 'exp')


def log_softmax(x):
    """Log-softmax over the last axis, computed with max subtraction"""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), _backward, 'log_softmax')


def causal_softmax(scores):
    """
    Row softmax of a square score matrix with positions j > i masked out.

    Row normalizers are accumulated in position order (cumsum) so a row's
    value never depends on how many later positions exist.
    """
    _ndim('causal_softmax', scores, 2)
    size = scores.shape[0]
    if scores.shape[1] != size:
        raise ShapeError(f"causal_softmax: expected a square matrix, got {scores.shape}")
    visible = np.tril(np.ones((size, size), dtype=bool))
    masked = np.where(visible, scores.data, -np.inf)
    weights = np.exp(masked - np.max(masked, axis=1, keepdims=True))
    totals = np.cumsum(weights, axis=1)[np.arange(size), np.arange(size)]
    probs = weights / totals[:, None]

    def _backward(g):
        return (probs * (g - np.sum(g * probs, axis=1, keepdims=True)),)

    return Tensor.from_op(probs, (scores,), _backward, 'causal_softmax')


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise layer normalization with affine parameters"""
    _ndim('layer_norm', x, 2)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for width {x.shape[1]}")
    mean = np.mean(x.data, axis=1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def _backward(g):
        g_normed = g * gamma.data
        grad_x = inv_std * (
            g_normed
            - np.mean(g_normed, axis=1, keepdims=True)
            - normed * np.mean(g_normed * normed, axis=1, keepdims=True)
        )
        return grad_x, np.sum(g * normed, axis=0), np.sum(g, axis=0)

    out = normed * gamma.data + beta.data
    return Tensor.from_op(out, (x, gamma, beta), _backward, 'layer_norm')


def gelu(x):
    """GELU, tanh approximation"""
    cubic = 0.044715 * x.data ** 3
    inner = np.tanh(GELU_C * (x.data + cubic))
    out = 0.5 * x.data * (1.0 + inner)

    def _backward(g):
        d_inner = (1.0 - inner ** 2) * GELU_C * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + inner) + 0.5 * x.data * d_inner),)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x,), _backward, 'gelu')


def row_sum(x):
    _ndim('row_sum', x, 2)
    return Tensor.from_op(np.sum(x.data, axis=1), (x,), lambda g: (np.repeat(g[:, None], x.shape[1], axis=1),), 'row_sum')


def total(x):
    """Sum of all entries (scalar)"""
    return Tensor.from_op(np.sum(x.data), (x,), lambda g: (np.full_like(x.data, g),), 'sum')


def mean(x):
    size = x.data.size
    return Tensor.from_op(np.sum(x.data) / size, (x,), lambda g: (np.full_like(x.data, g / size),), 'mean')


def weighted_sum(x, weights):
    """Sum of x * weights with weights held constant"""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs values {x.shape}")
    return Tensor.from_op(np.sum(x.data * weights), (x,), lambda g: (g * weights,), 'weighted_sum')


def stop_gradient(x):
    """Same values, cut from the graph"""
    out = Tensor(x.data.copy())
    out.op = 'stop_gradient'
    return out


def zeros_scalar(dtype=np.float64):
    """Constant 0 used for empty loss contributions"""
    return Tensor(np.zeros((), dtype=dtype))
