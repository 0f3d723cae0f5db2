"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy float64 array plus an optional record of the
operation that produced it (parents + a backward closure).  Calling
``backward`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the ``grad`` field of every leaf
that was created with ``requires_grad=True``.

All operations treat the last axis (or the last two, for matrix ops) as
the mathematical dimensions; any leading axes are independent batch
dimensions.  A plain matrix is therefore the 2-D base case of every op.
No stochastic operations exist, so a rebuilt graph on identical inputs
reproduces identical values and gradients bit for bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError

KL_EPS = 1e-8          # floor applied inside kl_div_rows logs
LAYER_NORM_EPS = 1e-5  # variance floor in layer_norm

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for teacher/eval passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A shaped float64 array, optionally participating in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A gradient-free copy of this tensor's values."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must hold a single element.  Repeated calls without
        ``zero_grad`` on the leaves keep accumulating; the traversal
        order is fixed by graph structure, so a repeat run after a reset
        is bit-identical.
        """
        if self.size != 1:
            raise UsageError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        topo = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def _toposort(root: Tensor) -> list[Tensor]:
    """Post-order DFS; parents appear before children in the result."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap a forward result, attaching the tape node when grads are live."""
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.op = op
        out.parents = ()
        out.backward_fn = None
        return out
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = True
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, unbroadcast on the way back)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _record(out, (a,), backward, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# matrix ops: last two axes are the matrix, leading axes broadcast
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (a,), backward, "transpose")


def swap_axes(a: Tensor, ax0: int, ax1: int) -> Tensor:
    out = np.swapaxes(a.data, ax0, ax1)

    def backward(g):
        return (np.swapaxes(g, ax0, ax1),)

    return _record(out, (a,), backward, "swap_axes")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over all leading axes."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"affine input width {x.shape} does not match weight {w.shape}"
        )
    vector_in = x.ndim == 1
    xd = x.data[None, :] if vector_in else x.data
    out = xd @ w.data + b.data
    if vector_in:
        out = out[0]

    def backward(g):
        gm = g[None, :] if vector_in else g
        gx = gm @ w.data.T
        if vector_in:
            gx = gx[0]
        gw = np.swapaxes(xd, -1, -2) @ gm
        gw = _unbroadcast(gw, w.shape)
        gb = gm.reshape(-1, gm.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _record(out, (x, w, b), backward, "affine")


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow for any float64 x."""
    out = _softplus_np(a.data)

    def backward(g):
        return (g * _sigmoid_np(a.data),)

    return _record(out, (a,), backward, "softplus")


def sqrt(a: Tensor) -> Tensor:
    """Element-wise square root; callers keep inputs strictly positive."""
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), backward, "sqrt")


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Element-wise Huber penalty: quadratic within delta, linear outside."""
    d = float(delta)
    absx = np.abs(a.data)
    out = np.where(absx <= d, 0.5 * a.data * a.data, d * (absx - 0.5 * d))

    def backward(g):
        return (g * np.clip(a.data, -d, d),)

    return _record(out, (a,), backward, "huber")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _record(out, (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward, "reshape")


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice the last axis to [start, stop)."""
    out = a.data[..., start:stop]

    def backward(g):
        gx = np.zeros(a.shape)
        gx[..., start:stop] = g
        return (gx,)

    return _record(out, (a,), backward, "col_slice")


def take_axis(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along ``axis``, dropping that axis."""
    out = a.data.take(index, axis=axis)

    def backward(g):
        gx = np.zeros(a.shape)
        sl = [slice(None)] * len(a.shape)
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _record(out, (a,), backward, "take_axis")


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        grads = []
        at = 0
        for w in widths:
            grads.append(g[..., at:at + w])
            at += w
        return tuple(grads)

    return _record(out, tuple(parts), backward, "concat_last")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the second-to-last axis (stack row blocks)."""
    heights = [p.shape[-2] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-2)

    def backward(g):
        grads = []
        at = 0
        for h in heights:
            grads.append(g[..., at:at + h, :])
            at += h
        return tuple(grads)

    return _record(out, tuple(parts), backward, "concat_rows")


def max_pool_time(a: Tensor) -> Tensor:
    """Maximum over the time axis (second-to-last); (..., T, d) -> (..., d).

    The subgradient routes to the first maximal entry along time, so
    repeated values resolve deterministically.
    """
    if a.ndim < 2:
        raise ShapeError(f"max_pool_time needs (..., T, d), got shape {a.shape}")
    idx = a.data.argmax(axis=-2)
    out = np.take_along_axis(a.data, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros(a.shape)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _record(out, (a,), backward, "max_pool_time")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale & shift."""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm feature width {x.shape} vs gain {gain.shape}, bias {bias.shape}"
        )
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        g_xhat = g * gain.data
        # standard layer-norm gradient over the normalized axis
        gx = (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv_std
        return gx, _unbroadcast(g_gain, gain.shape), _unbroadcast(g_bias, bias.shape)

    return _record(out, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# row-stochastic ops
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, tau: float, scl: float) -> Tensor:
    """Row-wise softmax of x / (tau * scl) along the last axis.

    Uses max subtraction, so any finite input yields rows summing to one.
    """
    tau = float(tau)
    scl = float(scl)
    if tau <= 0.0 or scl <= 0.0:
        raise DomainError(f"softmax_rows needs tau > 0 and scale > 0, got {tau}, {scl}")
    denom = tau * scl
    z = x.data / denom
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = g - (g * out).sum(axis=-1, keepdims=True)
        return (out * inner / denom,)

    return _record(out, (x,), backward, "softmax_rows")


def kl_div_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p_row || q_row), with both log arguments floored.

    Rows are the last axis; every leading axis indexes a row.  Each row
    of each argument must already sum to 1 (checked to 1e-6).  Values
    are floored at 1e-8 before entering the log, so hard rows stay
    finite; gradients flow to both arguments.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div_rows shapes differ: {p.shape} vs {q.shape}")
    _check_rows_stochastic(p.data, "first")
    _check_rows_stochastic(q.data, "second")
    m = int(np.prod(p.shape[:-1], dtype=np.int64)) if p.ndim > 1 else 1
    pf = np.maximum(p.data, KL_EPS)
    qf = np.maximum(q.data, KL_EPS)
    log_ratio = np.log(pf) - np.log(qf)
    out = np.array((p.data * log_ratio).sum() / m)

    def backward(g):
        gs = float(g)
        gp = (log_ratio + (p.data > KL_EPS)) * (gs / m)
        gq = -(p.data / qf) * (q.data > KL_EPS) * (gs / m)
        return gp, gq

    return _record(out, (p, q), backward, "kl_div_rows")


def _check_rows_stochastic(arr: np.ndarray, which: str) -> None:
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0) > 1e-6
    if bad.any():
        idx = int(np.argmax(bad.reshape(-1)))
        raise DomainError(
            f"{which} argument of kl_div_rows: row {idx} sums to "
            f"{sums.reshape(-1)[idx]:.9f}, not 1"
        )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative disagreement between backward() and central differences.

    ``f`` must be a deterministic composition of the ops in this module;
    the result for non-deterministic ``f`` is meaningless.  The relative
    error at each coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise UsageError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if not x.requires_grad:
        raise UsageError("finite_diff_check needs x.requires_grad=True")
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)  # perturbation needs a flat view
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise UsageError(f"f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
