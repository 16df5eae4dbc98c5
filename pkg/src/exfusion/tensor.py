"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 selectable for
verification work). Every primitive records a vector-Jacobian closure; a
backward pass linearizes the graph in topological order and visits each
recorded op exactly once, accumulating gradients into ``.grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "gelu",
    "softmax",
    "layernorm",
    "cross_entropy",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "embedding",
    "gather_rows",
    "scatter_rows",
    "index_first",
    "index_last",
    "combine",
    "as_np_dtype",
]

DTYPES = {"f32": np.float32, "f64": np.float64}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(ArithmeticError):
    """Raised when NaN/Inf values are detected at a tape boundary."""


def as_np_dtype(dtype) -> np.dtype:
    """Resolve 'f32'/'f64' (or a numpy dtype) to the numpy dtype object."""
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; expected 'f32' or 'f64'") from None
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {d}; expected float32 or float64")
    return d


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense real array participating in a reverse-mode gradient tape.

    Leaf tensors are validated to be finite on creation. Op outputs carry
    references to their inputs plus a vjp closure; ``backward()`` on a
    scalar populates ``.grad`` on every reachable tensor that requires
    gradients. Data is treated as immutable once on the tape; only ``grad``
    buffers mutate.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=as_np_dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate dL/dt into ``.grad`` for every tensor reachable from this scalar.

        Repeated calls without clearing grads keep accumulating.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss; got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("backward called on a non-finite loss")
        order = _linearize(self)
        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                buf = flow.get(id(parent))
                flow[id(parent)] = pg if buf is None else buf + pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add(self, Tensor(np.asarray(other, dtype=self.data.dtype)))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return sub(self, Tensor(np.asarray(other, dtype=self.data.dtype)))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _linearize(root: Tensor) -> list[Tensor]:
    """Topological order of the recorded ops reachable from ``root``.

    Inputs always precede the ops that consume them; the reverse walk in
    ``backward`` therefore visits each recorded op exactly once.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# -- helpers -------------------------------------------------------------------


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape`` by summation."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _check_broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise and linear primitives ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    _check_broadcastable(a, b, "add")

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    _check_broadcastable(a, b, "sub")

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    _check_broadcastable(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _sum_to(g * bd, a.shape), _sum_to(g * ad, b.shape)

    return Tensor._from_op(ad * bd, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not np.isfinite(s):
        raise NonFiniteError(f"scale by non-finite factor {s}")

    def vjp(g):
        return (g * s,)

    return Tensor._from_op(a.data * s, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dims broadcast, inner dims must agree."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands; got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _sum_to(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _sum_to(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(np.matmul(ad, bd), (a, b), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU x*Phi(x) (erf form, not the tanh approximation)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return Tensor._from_op(s, (a,), vjp)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layernorm eps must be > 0; got {eps}")
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({a.shape[-1]},); got {gain.shape} and {bias.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data
    reduce_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx, dgain, dbias

    return Tensor._from_op(out, (a, gain, bias), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target class. ``logits``: [B, C]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits; got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy targets shape {t.shape} does not match batch {logits.shape[0]}")
    n, c = logits.shape
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"cross_entropy target index out of range [0, {c})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (x - m) - np.log(z)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, t].mean(), dtype=x.dtype)

    def vjp(g):
        p = e / z
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(loss, (logits,), vjp)


# -- shape primitives ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape

    def vjp(g):
        return (g.reshape(src),)

    return Tensor._from_op(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return Tensor._from_op(a.data.transpose(axes), (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / count)


# -- gather / scatter primitives ----------------------------------------------


def _gather(table: Tensor, idx: np.ndarray, unique: bool) -> Tensor:
    td = table.data

    def vjp(g):
        gt = np.zeros_like(td)
        if unique:
            gt[idx] = g
        else:
            np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._from_op(td[idx], (table,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"token id out of range [0, {table.shape[0]})")
    return _gather(table, ids, unique=False)


def gather_rows(a: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows ``a[idx]``. Set ``unique=True`` only when indices never repeat."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"row index out of range [0, {a.shape[0]})")
    return _gather(a, idx, unique=unique)


def scatter_rows(values: Tensor, idx: np.ndarray, num_rows: int, unique: bool = True) -> Tensor:
    """Place ``values`` at rows ``idx`` of a zero tensor with ``num_rows`` rows."""
    idx = np.asarray(idx)
    if idx.shape != (values.shape[0],):
        raise ShapeError(f"scatter_rows: index shape {idx.shape} does not match values {values.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ValueError(f"row index out of range [0, {num_rows})")
    vd = values.data
    out = np.zeros((num_rows,) + vd.shape[1:], dtype=vd.dtype)
    if unique:
        out[idx] = vd
    else:
        np.add.at(out, idx, vd)

    def vjp(g):
        return (g[idx],)

    return Tensor._from_op(out, (values,), vjp)


def index_first(a: Tensor, i: int) -> Tensor:
    """Slice ``a[i]`` along the first axis."""
    i = int(i)
    if not 0 <= i < a.shape[0]:
        raise ValueError(f"index {i} out of range [0, {a.shape[0]})")
    src = a.data

    def vjp(g):
        out = np.zeros_like(src)
        out[i] = g
        return (out,)

    return Tensor._from_op(src[i], (a,), vjp)


def index_last(a: Tensor, i: int) -> Tensor:
    """Slice ``a[..., i]`` along the last axis."""
    i = int(i)
    if not 0 <= i < a.shape[-1]:
        raise ValueError(f"index {i} out of range [0, {a.shape[-1]})")
    src = a.data

    def vjp(g):
        out = np.zeros_like(src)
        out[..., i] = g
        return (out,)

    return Tensor._from_op(src[..., i], (a,), vjp)


def combine(weights: Tensor, stacked: Tensor) -> Tensor:
    """Weighted sum over the first axis: ``sum_i weights[i] * stacked[i]``.

    Gradients flow to both operands: the stacked slice ``i`` receives
    ``weights[i] * g`` and ``weights[i]`` receives ``<g, stacked[i]>``.
    """
    if weights.ndim != 1:
        raise ShapeError(f"combine weights must be a vector; got shape {weights.shape}")
    if weights.shape[0] != stacked.shape[0]:
        raise ShapeError(
            f"combine: {weights.shape[0]} weights for {stacked.shape[0]} stacked entries"
        )
    _check_same_dtype(weights, stacked, "combine")
    wd, sd = weights.data, stacked.data
    n = sd.shape[0]

    def vjp(g):
        gw = sd.reshape(n, -1) @ g.ravel()
        gs = np.multiply.outer(wd, g)
        return gw, gs

    return Tensor._from_op(np.tensordot(wd, sd, axes=(0, 0)), (weights, stacked), vjp)
