"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run tape: every operation records its parent tensors and a
vector-Jacobian callback on the output. ``Tensor.backward()`` walks the
recorded graph in reverse topological order and accumulates gradients into
``requires_grad`` leaves. Everything is 64-bit so finite-difference gradient
checks stay meaningful; any op producing NaN/Inf raises immediately.

Broadcasting follows numpy semantics for elementwise ops (gradients are
summed back to the parent shape). There is deliberately no GPU path, no
mixed precision and no operator fusion.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AutodiffError",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "set_finite_checks",
    "tensor",
    "concat",
    "stack",
    "matmul",
    "softmax",
    "gather_rows",
    "broadcast_to",
    "shift2d",
    "conv2d",
    "positional_encode",
    "posenc_dim",
    "custom_unary",
    "sigmoid",
    "softplus",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "sin",
    "cos",
]


class AutodiffError(RuntimeError):
    """Tape construction or backward-pass failure."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf values."""


class ShapeError(AutodiffError):
    """Operands have incompatible shapes."""


_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(flag: bool) -> bool:
    """Toggle the per-op NaN/Inf guard; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(flag)
    return prev


def _guard(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaves are created directly (``Tensor(data, requires_grad=True)``);
    interior nodes are created by ops and carry a vjp callback. ``grad``
    accumulates across ``backward()`` calls until ``zero_grad()``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        _guard(self.data, "leaf")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def _node(data, parents, vjp, op) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _guard(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- bookkeeping -----------------------------------------------------

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; leaf grads accumulate across calls."""
        if self.data.size != 1:
            raise AutodiffError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not (p.requires_grad or p._parents):
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over numpy-broadcast dimensions back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._node(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return Tensor._node(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._node(out, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    return Tensor._node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sin(a: Tensor) -> Tensor:
    return Tensor._node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return Tensor._node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return Tensor._node(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # stable two-branch form; never exponentiates a large positive argument
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._node(out, (a,), vjp, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    # softplus(x) = log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return Tensor._node(out, (a,), vjp, "softplus")


def custom_unary(a: Tensor, f: Callable, df: Callable, name: str = "custom") -> Tensor:
    """Elementwise op from a value function and its derivative (both numpy)."""
    out = f(a.data)

    def vjp(g):
        return (g * df(a.data),)

    return Tensor._node(out, (a,), vjp, name)


# -- structural ops --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._node(a.data @ b.data, (a, b), vjp, "matmul")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(out, (a,), vjp, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        g = np.asarray(g) / denom
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(out, (a,), vjp, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv) if inv is not None else g.transpose(),)

    return Tensor._node(a.data.transpose(axes), (a,), vjp, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        buf = np.zeros(a.shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return Tensor._node(out, (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return Tensor._node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "stack")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor._node(np.broadcast_to(a.data, shape).copy(), (a,), vjp, "broadcast_to")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward (embedding gather)."""
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        buf = np.zeros(table.shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return Tensor._node(table.data[idx], (table,), vjp, "gather_rows")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._node(out, (a,), vjp, "softmax")


def shift2d(a: Tensor, dy: int, dx: int = 0) -> Tensor:
    """Shift the last two axes by (dy, dx) with zero fill; vjp is the inverse shift."""

    def do_shift(arr, sy, sx):
        out = np.zeros_like(arr)
        h, w = arr.shape[-2], arr.shape[-1]
        ys = slice(max(sy, 0), h + min(sy, 0))
        yo = slice(max(-sy, 0), h + min(-sy, 0))
        xs = slice(max(sx, 0), w + min(sx, 0))
        xo = slice(max(-sx, 0), w + min(-sx, 0))
        out[..., ys, xs] = arr[..., yo, xo]
        return out

    def vjp(g):
        return (do_shift(g, -dy, -dx),)

    return Tensor._node(do_shift(a.data, dy, dx), (a,), vjp, "shift2d")


# -- convolution ------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo, xp.shape


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, NCHW layout; im2col forward, matmul backward."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {ci}")
    cols, ho, wo, padded_shape = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(co, -1)
    out = (cols @ wmat.T + bias.data).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        d_w = (gm.T @ cols).reshape(co, c, kh, kw)
        d_b = gm.sum(axis=0)
        dcols = (gm @ wmat).reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        d_x = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return d_x, d_w, d_b

    return Tensor._node(out, (x, weight, bias), vjp, "conv2d")


# -- positional encoding -----------------------------------------------------


def posenc_dim(input_dim: int, num_frequencies: int, include_input: bool) -> int:
    return input_dim * (2 * num_frequencies + (1 if include_input else 0))


def positional_encode(x: Tensor, num_frequencies: int, include_input: bool = True) -> Tensor:
    """Sinusoidal feature lift: per coordinate [x?, sin(2^j pi x), cos(2^j pi x)].

    Frequencies run j = 0 .. k-1 with base pi; the layout groups all features
    of one input coordinate together along the last axis.
    """
    x = _coerce(x)
    k = int(num_frequencies)
    freqs = (2.0 ** np.arange(k)) * np.pi  # (k,)
    xv = x.data[..., None]  # (..., D, 1)
    ang = xv * freqs  # (..., D, k)
    s, c = np.sin(ang), np.cos(ang)
    per_coord = [xv] if include_input else []
    # interleave sin/cos per frequency: (..., D, 2k (+1))
    sc = np.stack([s, c], axis=-1).reshape(*ang.shape[:-1], 2 * k)
    feats = np.concatenate(per_coord + [sc], axis=-1)
    out = feats.reshape(*x.shape[:-1], x.shape[-1] * (2 * k + (1 if include_input else 0)))

    def vjp(g):
        gf = g.reshape(*ang.shape[:-1], 2 * k + (1 if include_input else 0))
        off = 1 if include_input else 0
        gsc = gf[..., off:].reshape(*ang.shape[:-1], k, 2)
        dang = gsc[..., 0] * np.cos(ang) + gsc[..., 1] * (-np.sin(ang))
        dx = (dang * freqs).sum(axis=-1)
        if include_input:
            dx = dx + gf[..., 0]
        return (dx,)

    return Tensor._node(out, (x,), vjp, "positional_encode")
