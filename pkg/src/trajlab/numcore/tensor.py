"""Dense-tensor engine with reverse-mode automatic differentiation.

Every tensor op records a node on an implicit tape (the chain of parent
links hanging off each result). Calling ``backward`` on a scalar loss walks
that chain in reverse topological order and accumulates gradients into the
``grad`` field of every tensor that was created with ``requires_grad=True``.

Arrays are plain numpy; float32 is the training default, float64 is used by
the finite-difference tests. A single graph is single-threaded; independent
graphs may live on independent threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are not equal or broadcast-compatible."""


class GraphError(RuntimeError):
    """Graph misuse: backward on a non-scalar, or a second backward pass."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_owned = False
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    # -- shape info ---------------------------------------------------------

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

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._grad_owned = False
        out._done = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor below this scalar.

        A second call on the same graph is an error: the tape is consumed.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._done:
            raise GraphError("backward called twice on the same graph; run a new forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any requires_grad tensor")

        # Reverse topological order via iterative post-order DFS.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._done = True
        # Release the tape so activations can be freed.
        for node in reversed(order):
            if node._backward is not None:
                node._backward = None
                node._parents = ()
        self._done = True

    def _accumulate(self, g: np.ndarray) -> None:
        # First contribution is stored by reference (copy-on-write: backward
        # closures may hand the same array to several parents, so the stored
        # reference is never mutated in place until this tensor owns it).
        if self.grad is None:
            if g.dtype != self.data.dtype:
                g = g.astype(self.data.dtype)
                self._grad_owned = True
            else:
                self._grad_owned = False
            self.grad = g
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_broadcast(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible") from exc


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise & linear ops -------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a, DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul operands must have ndim >= 1")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x, DEFAULT_DTYPE)
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out_data * out_data))

    return Tensor._result(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x, DEFAULT_DTYPE)
    dt = x.data.dtype.type
    cdf = dt(0.5) * (dt(1.0) + erf(x.data * dt(_SQRT1_2)))
    out_data = x.data * cdf

    def backward(g):
        if x.requires_grad:
            pdf = dt(_INV_SQRT_2PI) * np.exp(dt(-0.5) * x.data * x.data)
            x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._result(out_data, (x,), backward)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x, DEFAULT_DTYPE)
    out_data = x.data * x.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * 2.0 * x.data)

    return Tensor._result(out_data, (x,), backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x, DEFAULT_DTYPE)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype))

    return Tensor._result(out_data, (x,), backward)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x, DEFAULT_DTYPE)
    n = x.size if axis is None else x.shape[axis]
    out_data = x.data.mean(axis=axis)

    def backward(g):
        if x.requires_grad:
            gs = g / n
            if axis is None:
                x._accumulate(np.broadcast_to(gs, x.shape).astype(x.dtype))
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(gs, axis), x.shape).astype(x.dtype))

    return Tensor._result(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x, DEFAULT_DTYPE)
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return Tensor._result(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x, DEFAULT_DTYPE)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inv))

    return Tensor._result(out_data, (x,), backward)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor by integer index (axis 0)."""
    x = _as_tensor(x, DEFAULT_DTYPE)
    indices = np.asarray(indices)
    out_data = x.data[indices]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, indices, g)
            x._accumulate(gx)

    return Tensor._result(out_data, (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t, DEFAULT_DTYPE) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return Tensor._result(out_data, tuple(tensors), backward)


# -- neural-net ops -----------------------------------------------------------


def _rowsum_lastaxis(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis via einsum (fast for short rows), keepdims."""
    flat = a.reshape(-1, a.shape[-1])
    s = np.einsum("nd->n", flat)
    return s.reshape(a.shape[:-1] + (1,))


def _rowdot_lastaxis(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    flat_a = a.reshape(-1, a.shape[-1])
    flat_b = b.reshape(-1, b.shape[-1])
    s = np.einsum("nd,nd->n", flat_a, flat_b)
    return s.reshape(a.shape[:-1] + (1,))


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get weight 0 exactly.

    ``mask`` is a boolean array broadcastable to ``x``; every row must keep at
    least one allowed position.
    """
    x = _as_tensor(x, DEFAULT_DTYPE)
    data = x.data
    last = axis == -1 or axis == data.ndim - 1
    if mask is not None:
        mask_b = np.broadcast_to(mask, data.shape)
        if not mask_b.any(axis=axis).all():
            raise ShapeError("softmax mask disallows every position in some row")
        shifted = np.where(mask_b, data, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        e = np.exp(shifted - m)
        e = np.where(mask_b, e, 0.0)
    else:
        m = data.max(axis=axis, keepdims=True)
        e = np.exp(data - m)
    denom = _rowsum_lastaxis(e) if last else e.sum(axis=axis, keepdims=True)
    out_data = e / denom

    def backward(g):
        if x.requires_grad:
            dot = _rowdot_lastaxis(out_data, g) if last else (out_data * g).sum(axis=axis, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = _as_tensor(x, DEFAULT_DTYPE)
    gamma = _as_tensor(gamma, x.dtype)
    beta = _as_tensor(beta, x.dtype)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm scale/shift must have shape ({d},)")
    inv_d = 1.0 / d
    mu = _rowsum_lastaxis(x.data) * inv_d
    ex2 = _rowdot_lastaxis(x.data, x.data) * inv_d
    var = np.maximum(ex2 - mu * mu, 0.0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        gflat = g.reshape(-1, d)
        if gamma.requires_grad:
            gamma._accumulate(np.einsum("nd,nd->d", gflat, xhat.reshape(-1, d)))
        if beta.requires_grad:
            beta._accumulate(np.einsum("nd->d", gflat))
        if x.requires_grad:
            gx = g * gamma.data
            # d/dx of xhat with mean/var both functions of x
            term = gx - _rowsum_lastaxis(gx) * inv_d - xhat * (_rowdot_lastaxis(gx, xhat) * inv_d)
            x._accumulate(term * inv)

    return Tensor._result(out_data, (x, gamma, beta), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id array; ids outside the table error."""
    table = _as_tensor(table, DEFAULT_DTYPE)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"token id out of range [0, {table.shape[0]}): ids span [{ids.min()}, {ids.max()}]"
        )
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return Tensor._result(out_data, (table,), backward)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved feature pairs (2i, 2i+1) of ``x`` by per-position angles.

    ``cos``/``sin`` have shape broadcastable to x[..., ::2]; they are constants
    (no gradient flows into them).
    """
    x = _as_tensor(x, DEFAULT_DTYPE)
    if x.shape[-1] % 2 != 0:
        raise ShapeError("rotary features require an even last dimension")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        if x.requires_grad:
            ge = g[..., 0::2]
            go = g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            x._accumulate(gx)

    return Tensor._result(out_data, (x,), backward)


def cross_entropy(logits: Tensor, target_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token cross-entropy over the positions selected by ``mask``.

    ``logits`` has shape (..., V), ``target_ids`` and ``mask`` the leading shape.
    An all-False mask is an error: it signals a degenerate masking draw upstream.
    """
    logits = _as_tensor(logits, DEFAULT_DTYPE)
    target_ids = np.asarray(target_ids)
    mask = np.asarray(mask, dtype=bool)
    lead = logits.shape[:-1]
    if target_ids.shape != lead or mask.shape != lead:
        raise ShapeError(
            f"targets/mask shape {target_ids.shape}/{mask.shape} must match logits leading {lead}"
        )
    n_sel = int(mask.sum())
    if n_sel == 0:
        raise ShapeError("cross_entropy mask selects zero positions")

    flat = logits.data.reshape(-1, logits.shape[-1])
    tgt = target_ids.reshape(-1)
    sel = mask.reshape(-1)
    rows = np.nonzero(sel)[0]
    z = flat[rows]
    t = tgt[rows]
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    nll = lse - z[np.arange(rows.size), t]
    out_data = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(rows.size), t] -= 1.0
            gflat = np.zeros_like(flat)
            gflat[rows] = p * (g / n_sel)
            logits._accumulate(gflat.reshape(logits.shape))

    return Tensor._result(out_data, (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    diff = sub(pred, target)
    return tensor_mean(square(diff))
