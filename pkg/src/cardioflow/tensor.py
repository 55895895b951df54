"""Dense tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every differentiable operation records its
parent tensors and a backward closure on its output, so the tape is
rebuilt from scratch on every training step.  ``backward`` walks the
recorded graph exactly once in reverse topological order and accumulates
``d loss / d leaf`` into every ``requires_grad`` leaf; repeated calls
without ``zero_grad`` keep accumulating.

Model state is 32-bit.  All operations preserve the dtype of their
inputs, which lets test oracles evaluate the same graph in float64.
Binary operations broadcast only along leading singleton extents.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, ValidationError

Scalar = Union[int, float]


class Tensor:
    """A numpy-backed array plus an optional gradient accumulator.

    ``grad`` is allocated lazily on first accumulation and always has the
    same shape and dtype as ``data``.  Tensors are immutable after
    creation except for ``grad`` (written during backward) and in-place
    parameter updates performed by the optimizer between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        src = self

        def bwd(g):
            src.accumulate_grad(np.broadcast_to(g, src.data.shape))

        return _make(self.data.sum().reshape(()), (self,), bwd, "sum")

    def mean(self) -> "Tensor":
        src = self
        n = self.data.size

        def bwd(g):
            src.accumulate_grad(np.broadcast_to(g / n, src.data.shape))

        return _make((self.data.sum() / n).reshape(()), (self,), bwd, "mean")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}, op={self.op})"


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd, op: str) -> Tensor:
    """Record one operation node; the tape entry is dropped when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Validate that two shapes differ only in leading singleton extents."""
    n = max(len(sa), len(sb))
    ea = (1,) * (n - len(sa)) + tuple(sa)
    eb = (1,) * (n - len(sb)) + tuple(sb)
    mismatched = [i for i in range(n) if ea[i] != eb[i]]
    if any(1 not in (ea[i], eb[i]) for i in mismatched) or mismatched != list(range(len(mismatched))):
        raise DimensionError(
            f"shapes {tuple(sa)} and {tuple(sb)} are not broadcastable along leading singleton extents"
        )
    return tuple(max(ea[i], eb[i]) for i in range(n))


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_operands(a, b):
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b, dtype=ta.dtype)
    broadcast_shape(ta.shape, tb.shape)
    return ta, tb


def add(a, b) -> Tensor:
    ta, tb = _as_operands(a, b)

    def bwd(g):
        ta.accumulate_grad(_reduce_to(g, ta.shape))
        tb.accumulate_grad(_reduce_to(g, tb.shape))

    return _make(ta.data + tb.data, (ta, tb), bwd, "add")


def sub(a, b) -> Tensor:
    ta, tb = _as_operands(a, b)

    def bwd(g):
        ta.accumulate_grad(_reduce_to(g, ta.shape))
        tb.accumulate_grad(_reduce_to(-g, tb.shape))

    return _make(ta.data - tb.data, (ta, tb), bwd, "sub")


def mul(a, b) -> Tensor:
    ta, tb = _as_operands(a, b)

    def bwd(g):
        ta.accumulate_grad(_reduce_to(g * tb.data, ta.shape))
        tb.accumulate_grad(_reduce_to(g * ta.data, tb.shape))

    return _make(ta.data * tb.data, (ta, tb), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(-g)

    return _make(-a.data, (a,), bwd, "neg")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), bwd, "exp")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    x = a.data

    def bwd(g):
        a.accumulate_grad(g * np.where(x >= 0, x.dtype.type(1), x.dtype.type(slope)))

    return _make(np.where(x >= 0, x, x.dtype.type(slope) * x), (a,), bwd, "leaky_relu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data

    def bwd(g):
        a.accumulate_grad(g * ((x >= lo) & (x <= hi)).astype(x.dtype))

    return _make(np.clip(x, lo, hi), (a,), bwd, "clamp")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(parts, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    return _make(np.concatenate([t.data for t in parts], axis=axis), parts, bwd, "concat")


def matmul_channels(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-voxel linear channel mixing, i.e. a 1x1x1 convolution.

    ``x`` is (batch, in_ch, *spatial), ``w`` is (out_ch, in_ch); the
    gradient wrt ``w`` is the sum over voxels of outer products.
    """
    if x.data.ndim < 2:
        raise DimensionError(f"matmul_channels needs (batch, channels, ...), got {x.shape}")
    if w.data.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"weight {w.shape} does not match input channels of {x.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match out channels {w.shape[0]}")
    b_n, c_in = x.shape[0], x.shape[1]
    spatial = x.shape[2:]
    c_out = w.shape[0]
    x2 = x.data.reshape(b_n, c_in, -1)
    out = np.matmul(w.data, x2)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1)

    def bwd(g):
        g2 = g.reshape(b_n, c_out, -1)
        if x.requires_grad:
            x.accumulate_grad(np.matmul(w.data.T, g2).reshape(x.data.shape))
        if w.requires_grad:
            w.accumulate_grad(np.einsum("bon,bcn->oc", g2, x2))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 2)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out.reshape((b_n, c_out) + spatial), parents, bwd, "matmul_channels")


def topo_order(root: Tensor) -> list:
    """Nodes of the recorded graph, every parent before its consumers."""
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into every reachable requires_grad leaf."""
    if loss.data.size != 1:
        raise ValidationError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None  # free intermediates; leaves keep their accumulators


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
