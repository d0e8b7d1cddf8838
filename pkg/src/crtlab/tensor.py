"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every primitive builds a new :class:`Tensor` that remembers its operands and
a closure mapping the output gradient to operand gradients.  Calling
:func:`backward` on a scalar orders the recorded graph topologically (the
tape) and replays it in reverse.

Only the primitives needed for MLP training and input-gradient attacks are
provided: matmul, add/sub/mul, relu, softmax cross-entropy, sum/mean,
last-axis L2 norm, clamp, gather, maximum, reshape and bilinear sampling.
"""

from __future__ import annotations

import numpy as np

from .errors import GradientError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "softmax_cross_entropy",
    "tensor_sum",
    "mean",
    "l2_norm",
    "clamp",
    "maximum",
    "take_along_last",
    "reshape",
    "bilinear_sample",
    "backward",
    "topological_order",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op}: produced {bad} non-finite value(s) in output of shape {np.shape(arr)}")


def _make(op, data, parents, backward_fn):
    _check_finite(op, data)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _broadcast_shape(op, sa, sb):
    # leading-axis broadcasting only: equal shapes, scalars, or one shape a suffix of the other
    if sa == sb:
        return sa
    if len(sa) == 0:
        return sb
    if len(sb) == 0:
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def back(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make("matmul", out, (a, b), back)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    out = a.data + b.data

    def back(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    out = a.data - b.data

    def back(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), back)


def neg(a):
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_cross_entropy(logits, labels):
    """Per-example cross-entropy ``-log softmax(logits)[y]``, shape ``[n]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    out = lse - z[rows, labels]

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _make("softmax_cross_entropy", out, (logits,), back)


def tensor_sum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return mul(tensor_sum(a, axis), 1.0 / count)


def l2_norm(a):
    """Euclidean norm along the last axis.  The gradient at a zero vector is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=-1))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * scale[..., None],)

    return _make("l2_norm", out, (a,), back)


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make("clamp", out, (a,), lambda g: (g * mask,))


def maximum(a, b):
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make("maximum", out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


def take_along_last(a, index):
    """``out[i, j] = a[i, index[i, j]]`` for ``a`` of shape ``[n, L]``."""
    a = as_tensor(a)
    index = np.asarray(index)
    if a.data.ndim != 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"take_along_last: source {a.shape} vs index {index.shape}")
    out = np.take_along_axis(a.data, index, axis=1)

    def back(g):
        n, width = a.shape
        flat = (np.arange(n)[:, None] * width + index).ravel()
        acc = np.bincount(flat, weights=g.ravel(), minlength=n * width)
        return (acc.reshape(a.shape),)

    return _make("take_along_last", out, (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def bilinear_sample(grid, coords):
    """Sample ``grid[n, H, W]`` at fractional ``coords[n, ..., 2]`` (row, col).

    Coordinates outside ``[0, H-1] x [0, W-1]`` are clamped to the border.
    Differentiable with respect to both grid values and coordinates; the
    coordinate gradient is zero in a component that was clamped.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.data.ndim != 3 or coords.data.ndim < 2 or coords.shape[-1] != 2 or coords.shape[0] != grid.shape[0]:
        raise ShapeError(f"bilinear_sample: grid {grid.shape} vs coords {coords.shape}")
    n, H, W = grid.shape
    out_shape = coords.shape[:-1]
    c = coords.data.reshape(n, -1, 2)
    r = np.clip(c[..., 0], 0.0, H - 1)
    q = np.clip(c[..., 1], 0.0, W - 1)
    inside_r = (c[..., 0] >= 0) & (c[..., 0] <= H - 1)
    inside_q = (c[..., 1] >= 0) & (c[..., 1] <= W - 1)
    r0 = np.floor(r).astype(np.int64)
    q0 = np.floor(q).astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    q1 = np.minimum(q0 + 1, W - 1)
    wr = r - r0
    wq = q - q0
    flat = grid.data.reshape(n, H * W)
    bidx = np.arange(n)[:, None]
    v00 = flat[bidx, r0 * W + q0]
    v01 = flat[bidx, r0 * W + q1]
    v10 = flat[bidx, r1 * W + q0]
    v11 = flat[bidx, r1 * W + q1]
    top = v00 + wq * (v01 - v00)
    bot = v10 + wq * (v11 - v10)
    out = (top + wr * (bot - top)).reshape(out_shape)

    def back(g):
        g = g.reshape(n, -1)
        d_r = (bot - top) * g * inside_r
        d_q = ((1 - wr) * (v01 - v00) + wr * (v11 - v10)) * g * inside_q
        d_coords = np.stack([d_r, d_q], axis=-1).reshape(coords.shape)
        base = np.arange(n)[:, None] * (H * W)
        idx = np.concatenate(
            [base + r0 * W + q0, base + r0 * W + q1, base + r1 * W + q0, base + r1 * W + q1], axis=1
        ).ravel()
        w = np.concatenate(
            [(1 - wr) * (1 - wq) * g, (1 - wr) * wq * g, wr * (1 - wq) * g, wr * wq * g], axis=1
        ).ravel()
        d_grid = np.bincount(idx, weights=w, minlength=n * H * W).reshape(grid.shape)
        return (d_grid, d_coords)

    return _make("bilinear_sample", out, (grid, coords), back)


def topological_order(root):
    """Operands-before-results ordering of the graph reachable from ``root``."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate: calling twice without zeroing doubles them.
    """
    if not isinstance(loss, Tensor):
        raise GradientError(f"backward: expected a Tensor, got {type(loss).__name__}")
    if loss.data.ndim != 0:
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("backward: loss is not recorded on the tape (nothing requires grad)")
    order = topological_order(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
