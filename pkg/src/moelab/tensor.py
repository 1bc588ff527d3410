"""Dense tensors with reverse-mode autodiff on a define-by-run tape.

The engine is numpy-backed and intentionally small: it covers exactly the
ops the MoE transformer graph needs. Every forward op validates that its
output is finite, so NaN/Inf surface at the op that produced them instead
of poisoning the loss. Gradients accumulate additively; a value consumed
twice receives both contributions.

Default precision is 64-bit. A 32-bit mode exists for experiments but the
test-suite tolerances assume 64-bit.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the global tensor dtype (np.float64 or np.float32)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Graph:
    """Append-only op tape. Backward walks nodes in reverse append order."""

    _active: "Graph | None" = None

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ran_backward = False

    def __enter__(self) -> "Graph":
        if Graph._active is not None:
            raise RuntimeError("a graph is already active")
        Graph._active = self
        return self

    def __exit__(self, *exc):
        Graph._active = None
        return False

    def backward(self, root: "Tensor") -> None:
        """Seed d(root)=1 and run every recorded backward exactly once."""
        if self._ran_backward:
            raise RuntimeError("backward already ran on this graph")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if root.grad is None:
            raise RuntimeError("backward root is not on the tape")
        self._ran_backward = True
        root.grad[...] = 1.0
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()


def _recording() -> bool:
    return Graph._active is not None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._backward = None
        self.op = "leaf"
        _ensure_finite(self.data, "leaf")

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._backward = None
        out.op = "detach"
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, op: str, inputs: tuple, backward=None) -> Tensor:
    """Build an op output, check finiteness, record on the active tape."""
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.requires_grad = _recording() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.grad = np.zeros_like(data)
        out._backward = backward
        Graph._active.nodes.append(out)
    else:
        out.grad = None
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data + b.data, "add", (a, b))

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data - b.data, "sub", (a, b))

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(out.grad, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data * b.data, "mul", (a, b))

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.data, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data / b.data, "div", (a, b))

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad / b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, "neg", (a,))

    def backward():
        a.grad -= out.grad

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor, row_stable: bool = False) -> Tensor:
    """Matrix product. 2-D or batched (leading dims must match exactly).

    row_stable=True switches the 2-D forward kernel to an einsum that
    reduces each output element independently, so a row's bits never depend
    on how many other rows the operand has. BLAS gemm does not guarantee
    that, and the MoE dispatch needs it: routing changes elsewhere in the
    batch regroup the per-expert matmuls, and regrouping must not perturb
    unaffected tokens.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow becomes a NonFiniteError in _make below
        if row_stable:
            if a.ndim != 2:
                raise ShapeError("row_stable matmul is 2-D only")
            data = np.einsum("ik,kj->ij", a.data, b.data)
        else:
            data = np.matmul(a.data, b.data)
    out = _make(data, "matmul", (a, b))

    def backward():
        if a.requires_grad:
            a.grad += np.matmul(out.grad, b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.grad += np.matmul(a.data.swapaxes(-1, -2), out.grad)

    out._backward = backward if out.requires_grad else None
    return out


def square(a: Tensor) -> Tensor:
    out = _make(a.data * a.data, "square", (a,))

    def backward():
        a.grad += 2.0 * a.data * out.grad

    out._backward = backward if out.requires_grad else None
    return out


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value. Subgradient at 0 is taken as 0."""
    out = _make(np.abs(a.data), "abs", (a,))

    def backward():
        a.grad += np.sign(a.data) * out.grad

    out._backward = backward if out.requires_grad else None
    return out


# -- elementwise nonlinearities ---------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(data, "sigmoid", (a,))

    def backward():
        a.grad += out.grad * out.data * (1.0 - out.data)

    out._backward = backward if out.requires_grad else None
    return out


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(x * s, "silu", (a,))

    def backward():
        a.grad += out.grad * s * (1.0 + x * (1.0 - s))

    out._backward = backward if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes a NonFiniteError below
        out = _make(np.exp(a.data), "exp", (a,))

    def backward():
        a.grad += out.grad * out.data

    out._backward = backward if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out = _make(np.log(a.data), "log", (a,))

    def backward():
        a.grad += out.grad / a.data

    out._backward = backward if out.requires_grad else None
    return out


def rsqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("rsqrt of non-positive value")
    out = _make(a.data ** -0.5, "rsqrt", (a,))

    def backward():
        a.grad += out.grad * (-0.5) * a.data ** -1.5

    out._backward = backward if out.requires_grad else None
    return out


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,))

    def backward():
        a.grad += _expand_reduced(out.grad, a.shape, axis, keepdims)

    out._backward = backward if out.requires_grad else None
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,))
    count = a.data.size // max(out.data.size, 1)

    def backward():
        a.grad += _expand_reduced(out.grad, a.shape, axis, keepdims) / count

    out._backward = backward if out.requires_grad else None
    return out


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), "reshape", (a,))

    def backward():
        a.grad += out.grad.reshape(a.shape)

    out._backward = backward if out.requires_grad else None
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = _make(a.data.transpose(axes) if axes else a.data.T, "transpose", (a,))

    def backward():
        if axes:
            inv = np.argsort(axes)
            a.grad += out.grad.transpose(inv)
        else:
            a.grad += out.grad.T

    out._backward = backward if out.requires_grad else None
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = _make(a.data.swapaxes(ax1, ax2), "swapaxes", (a,))

    def backward():
        a.grad += out.grad.swapaxes(ax1, ax2)

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + n)
                t.grad += out.grad[tuple(idx)]
            offset += n

    out._backward = backward if out.requires_grad else None
    return out


def slice_(a: Tensor, key) -> Tensor:
    out = _make(np.ascontiguousarray(a.data[key]), "slice", (a,))

    def backward():
        # basic-slicing keys never alias an element twice, so += is exact
        a.grad[key] += out.grad

    out._backward = backward if out.requires_grad else None
    return out


# -- gather / scatter --------------------------------------------------------


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather along axis 0; also serves as the embedding lookup."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")
    out = _make(a.data[idx], "take_rows", (a,))

    def backward():
        np.add.at(a.grad, idx, out.grad)

    out._backward = backward if out.requires_grad else None
    return out


def scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Sum `values` rows into a fresh [n_rows, ...] zero tensor at `idx`."""
    idx = np.asarray(idx)
    data = np.zeros((n_rows,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(data, idx, values.data)
    out = _make(data, "scatter_rows", (values,))

    def backward():
        values.grad += out.grad[idx]

    out._backward = backward if out.requires_grad else None
    return out


def gather_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """a[rows[i], cols[i]] for each i; backward scatter-adds."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = _make(a.data[rows, cols], "gather_pairs", (a,))

    def backward():
        np.add.at(a.grad, (rows, cols), out.grad)

    out._backward = backward if out.requires_grad else None
    return out


# -- softmax family ----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _make(data, "softmax", (a,))

    def backward():
        y, g = out.data, out.grad
        a.grad += y * (g - (g * y).sum(axis=axis, keepdims=True))

    out._backward = backward if out.requires_grad else None
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = _make(s - lse, "log_softmax", (a,))

    def backward():
        g = out.grad
        a.grad += g - np.exp(out.data) * g.sum(axis=axis, keepdims=True)

    out._backward = backward if out.requires_grad else None
    return out


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = np.exp(x - m)
    data = m + np.log(s.sum(axis=axis, keepdims=True))
    if not keepdims:
        data = data.squeeze(axis=axis)
    out = _make(data, "logsumexp", (a,))

    def backward():
        g = out.grad if keepdims else np.expand_dims(out.grad, axis)
        a.grad += s / s.sum(axis=axis, keepdims=True) * g

    out._backward = backward if out.requires_grad else None
    return out


# -- rotary embedding --------------------------------------------------------


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate half-split feature pairs by per-position angles.

    a: [..., d] with even d; cos/sin broadcast against [..., d/2].
    Backward applies the inverse rotation (rotations are orthogonal).
    """
    d = a.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs an even last dim, got {d}")
    h = d // 2
    x1, x2 = a.data[..., :h], a.data[..., h:]
    data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    out = _make(data, "rope", (a,))

    def backward():
        g1, g2 = out.grad[..., :h], out.grad[..., h:]
        a.grad[..., :h] += g1 * cos + g2 * sin
        a.grad[..., h:] += -g1 * sin + g2 * cos

    out._backward = backward if out.requires_grad else None
    return out
