"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what the rest of the package needs: elementwise
arithmetic, 2-D matmul, convolution, reductions, nearest-neighbor
upsampling, softmax and embedding lookup. The graph is rebuilt on every
forward pass; calling :func:`backward` consumes it.

Tensors are immutable once created. Gradient recording is controlled by a
thread-local flag so read-only forward passes can run concurrently in
worker threads under :func:`no_grad`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar; scalars are promoted
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"operands have incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a plain scalar."""
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn)


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=False)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(np.float64),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(np.float64),)

    return _result(out, (a,), grad_fn)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), grad_fn)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def grad_fn(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (a,), grad_fn)


def take_rows(table, ids) -> Tensor:
    """Row lookup into a 2-D table; gradients scatter-add back."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"row ids out of range for table with {table.data.shape[0]} rows")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), grad_fn)


def global_average_pool(a) -> Tensor:
    """Mean over the spatial axes of a [C, H, W] tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"global_average_pool expects [C, H, W], got {a.shape}")
    c, h, w = a.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).astype(np.float64),)

    return _result(a.data.mean(axis=(1, 2)), (a,), grad_fn)


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of a [C, H, W] tensor by an integer factor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"upsample_nearest expects [C, H, W], got {a.shape}")
    f = int(factor)
    if f < 1:
        raise ValueError("factor must be >= 1")
    c, h, w = a.data.shape
    out = a.data.repeat(f, axis=1).repeat(f, axis=2)

    def grad_fn(g):
        return (g.reshape(c, h, f, w, f).sum(axis=(2, 4)),)

    return _result(out, (a,), grad_fn)


def downsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbor decimation of a [C, H, W] tensor by an integer factor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"downsample_nearest expects [C, H, W], got {a.shape}")
    f = int(factor)
    if f < 1:
        raise ValueError("factor must be >= 1")
    if a.data.shape[1] % f or a.data.shape[2] % f:
        raise ShapeError(f"extents {a.shape[1:]} not divisible by factor {f}")

    def grad_fn(g):
        gx = np.zeros_like(a.data)
        gx[:, ::f, ::f] = g
        return (gx,)

    return _result(np.ascontiguousarray(a.data[:, ::f, ::f]), (a,), grad_fn)


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in, H, W] with [C_out, C_in, k, k] kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects input [C_in, H, W] and kernels [C_out, C_in, k, k], "
            f"got {x.shape} and {kernels.shape}"
        )
    c_out, c_in, kh, kw = kernels.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd extent, got {kh}x{kw}")
    if x.data.shape[0] != c_in:
        raise ShapeError(
            f"input channels {x.data.shape[0]} do not match kernel channels {c_in}"
        )
    stride, padding = int(stride), int(padding)
    _, h, w = x.data.shape
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"non-integral output extent for input {x.shape}, kernel {kh}, "
            f"stride {stride}, padding {padding}"
        )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # [C_in*k*k, H_out*W_out] column matrix; reused by both gradient paths
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    kmat = kernels.data.reshape(c_out, c_in * kh * kw)
    out = (kmat @ cols).reshape(c_out, h_out, w_out)

    def grad_fn(g):
        gmat = g.reshape(c_out, h_out * w_out)
        grad_k = (gmat @ cols.T).reshape(kernels.data.shape)
        grad_cols = (kmat.T @ gmat).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + stride * h_out : stride, dj : dj + stride * w_out : stride] += (
                    grad_cols[:, di, dj]
                )
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding]
        return gxp, grad_k

    return _result(out, (x, kernels), grad_fn)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns the gradient for every tensor in the graph that requires one,
    keyed by tensor identity; the same arrays are left on ``.grad``. The
    graph is consumed: a second sweep through the same nodes raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (no graph recorded)")
    if loss._parents and loss._grad_fn is None:
        raise GraphError("graph already consumed by a previous backward")

    order = []
    seen = set()
    stack = [(loss, False)]
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

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
        node._grad_fn = None

    return {node: node.grad for node in order if node.requires_grad}
