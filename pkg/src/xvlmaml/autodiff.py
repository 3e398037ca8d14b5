"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is define-by-run: every operation on :class:`Tensor` inputs records
its parents and a backward closure on the tensor it produces, so the graph is
the DAG of tensors itself and topological order coincides with creation order.
Backward closures are written in terms of the engine's own operations.  Running
a backward pass with ``create_graph=True`` therefore yields gradients that are
themselves differentiable, which is what makes gradients *through* a gradient
descent step (:func:`grad_through_step`) exact instead of approximated.

All data is float64; verifying second-order quantities against central finite
differences is unreliable in float32.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager, nullcontext
from heapq import heappush, heappop
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "as_tensor",
    "zeros_like",
    "no_grad",
    "checked",
    "corrupt_vjp",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "tensor_sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "gather_rows",
    "scatter_rows",
    "l2_norm",
    "grad",
    "grad_through_step",
]


class GraphError(ValueError):
    """The requested differentiation is ill-posed (non-scalar or detached loss)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value was produced (raised in checked mode)."""


_seq_counter = itertools.count()
_grad_enabled: bool = True
_checked: bool = False
# op name -> multiplicative corruption applied to its parent gradients.
# Fault-injection hook for the gradient-check harness; empty in normal use.
_corrupted_vjps: dict[str, float] = {}


@contextmanager
def no_grad():
    """Disable graph recording within the block (results become constants)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def checked(enabled: bool = True):
    """Scan every op output for NaN/Inf within the block."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


@contextmanager
def corrupt_vjp(op: str, factor: float = 1.01):
    """Deliberately mis-scale the backward pass of one op (test hook)."""
    _corrupted_vjps[op] = factor
    try:
        yield
    finally:
        del _corrupted_vjps[op]


class Tensor:
    """A float64 array plus its position in the differentiation graph.

    Leaf tensors are created directly (optionally with ``requires_grad``);
    non-leaf tensors are created by ops and carry a backward closure.  ``seq``
    is a globally increasing creation index: it both identifies the node and
    fixes the deterministic backward order.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "seq", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[["Tensor"], tuple] | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.seq = next(_seq_counter)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from the graph."""
        return Tensor(self.data, op="detach")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op {op!r}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents=parents, vjp=vjp, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (differentiably)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tensor_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tensor_sum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _node("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _node("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, out), b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out = _node("div", out_data, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return _node("neg", -a.data, (a,), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _node("scale", a.data * c, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _node("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g):
        return (transpose(g),)

    return _node("transpose", a.data.T, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape

    def vjp(g):
        return (reshape(g, old),)

    return _node("reshape", a.data.reshape(shape), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape

    def vjp(g):
        return (_unbroadcast(g, old),)

    return _node("broadcast", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    if axis is None:
        reduced_axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        reduced_axes = (axis % a.ndim,)
    else:
        reduced_axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        if not keepdims:
            kept = [1 if i in reduced_axes else s for i, s in enumerate(in_shape)]
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    return _node("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    if n == 0:
        raise ValueError("mean of an empty axis")
    return scale(tensor_sum(a, axis=axis), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (mul(g, out),)

    out = _node("exp", np.exp(a.data), (a,), vjp)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (div(g, a),)

    return _node("log", np.log(a.data), (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (div(scale(g, 0.5), out),)

    out = _node("sqrt", np.sqrt(a.data), (a,), vjp)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _node("tanh", np.tanh(a.data), (a,), vjp)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0.0).astype(np.float64))

    def vjp(g):
        return (mul(g, mask),)

    return _node("relu", np.maximum(a.data, 0.0), (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = tensor_sum(mul(g, out), axis=axis, keepdims=True)
        return (mul(sub(g, inner), out),)

    out = _node("softmax", y, (a,), vjp)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def vjp(g):
        total = tensor_sum(g, axis=axis, keepdims=True)
        return (sub(g, mul(softmax(a, axis=axis), total)),)

    return _node("log_softmax", shifted - lse, (a,), vjp)


def gather_rows(a, indices) -> Tensor:
    """Pick one column per row: ``out[i] = a[i, indices[i]]``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ValueError(f"gather_rows: got matrix {a.shape} and indices {idx.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        return (scatter_rows(g, idx, a.shape),)

    return _node("gather", a.data[rows, idx], (a,), vjp)


def scatter_rows(g, indices, shape) -> Tensor:
    """Inverse of :func:`gather_rows`: place ``g[i]`` at ``(i, indices[i])``."""
    g = as_tensor(g)
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros(shape, dtype=np.float64)
    data[np.arange(shape[0]), idx] = g.data

    def vjp(up):
        return (gather_rows(up, idx),)

    return _node("scatter", data, (g,), vjp)


def l2_norm(a) -> Tensor:
    """Euclidean norm of all entries, as a scalar tensor."""
    a = as_tensor(a)
    return sqrt(tensor_sum(mul(a, a)))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def grad(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Parameters not on any path to the loss get zero gradients.  With
    ``create_graph=True`` the returned gradients are graph tensors that can be
    differentiated again; otherwise they are constants.

    Raises :class:`GraphError` if the loss is not a scalar or was not produced
    from any differentiable tensor through recorded operations.
    """
    wrt = list(wrt)
    if loss.shape != ():
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to the differentiation graph")

    grads: dict[int, Tensor] = {loss.seq: Tensor(1.0)}
    nodes: dict[int, Tensor] = {loss.seq: loss}
    heap: list[int] = [-loss.seq]

    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        # Walk nodes in decreasing creation order. Consumers of any tensor are
        # created after it, so each node's gradient is complete when popped.
        while heap:
            seq = -heappop(heap)
            node = nodes.pop(seq)
            if node.vjp is None:
                continue
            parent_grads = node.vjp(grads[seq])
            factor = _corrupted_vjps.get(node.op)
            if factor is not None:
                parent_grads = tuple(
                    None if pg is None else scale(pg, factor) for pg in parent_grads
                )
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.seq in grads:
                    grads[parent.seq] = add(grads[parent.seq], pg)
                else:
                    grads[parent.seq] = pg
                    nodes[parent.seq] = parent
                    heappush(heap, -parent.seq)
        return [grads.get(p.seq, zeros_like(p)) for p in wrt]


def grad_through_step(
    outer_loss_fn: Callable[[list[Tensor]], Tensor],
    inner_loss_fn: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    alpha: float,
    first_order: bool = False,
) -> list[Tensor]:
    """Gradient of ``outer_loss(p - alpha * grad(inner_loss)(p))`` w.r.t. ``p``.

    The exact total derivative includes the curvature of the inner loss; with
    ``first_order=True`` the inner gradient is treated as a constant, so the
    adaptation Jacobian becomes the identity and the result is simply the outer
    gradient evaluated at the adapted parameters.
    """
    if alpha < 0:
        raise ValueError(f"step size must be nonnegative, got {alpha}")
    params = list(params)
    inner_loss = inner_loss_fn(params)
    inner_grads = grad(inner_loss, params, create_graph=not first_order)
    adapted = [sub(p, scale(g, alpha)) for p, g in zip(params, inner_grads)]
    outer_loss = outer_loss_fn(adapted)
    return grad(outer_loss, params)
