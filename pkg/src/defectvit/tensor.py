"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every tensor produced by an operation remembers its parents and a closure
that pushes the output gradient back to them. ``Tensor.backward`` sorts the
reachable graph topologically (the tape) and runs each closure exactly once,
in reverse order.

Storage is float32 by default. Passing ``dtype=np.float64`` gives a float64
graph, which is what the finite-difference checks use.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "gelu",
    "sigmoid",
    "log",
    "exp",
    "square",
    "clamp_min",
    "softmax_lastdim",
    "layernorm",
    "dropout",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "tape",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional value that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        out.op = op
        return out

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every requires-grad tensor reachable from self."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() root is not part of a gradient graph")
        order = tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            # interior nodes keep their gradient too; handy for inspection
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(x, dtype=dtype)


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes feeding ``root`` (inputs first)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor._make(a.data + b.data, (a, b), "add")
    out._backward = lambda g: ((a, g), (b, g))
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor._make(a.data - b.data, (a, b), "sub")
    out._backward = lambda g: ((a, g), (b, -g))
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor._make(a.data * b.data, (a, b), "mul")
    out._backward = lambda g: ((a, g * b.data), (b, g * a.data))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu")
    # derivative at exactly 0 is taken as 0
    out._backward = lambda g: ((x, g * mask),)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = Tensor._make((0.5 * v * (1.0 + t)).astype(x.dtype), (x,), "gelu")

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return ((x, g * d),)

    out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor._make(s, (x,), "sigmoid")
    out._backward = lambda g: ((x, g * s * (1 - s)),)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].reshape(-1)[0])
        raise DomainError(f"log of non-positive value ({bad})")
    out = Tensor._make(np.log(x.data), (x,), "log")
    out._backward = lambda g: ((x, g / x.data),)
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor._make(e, (x,), "exp")
    out._backward = lambda g: ((x, g * e),)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor._make(x.data * x.data, (x,), "square")
    out._backward = lambda g: ((x, 2 * g * x.data),)
    return out


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = x.data > floor
    out = Tensor._make(np.where(mask, x.data, floor).astype(x.dtype), (x,), "clamp_min")
    out._backward = lambda g: ((x, g * mask),)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # reductions accumulate in float64
    s = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    out = Tensor._make(np.asarray(s), (x,), "sum")

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape)),)

    out._backward = _bw
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._make(x.data.reshape(shape), (x,), "reshape")
    out._backward = lambda g: ((x, g.reshape(x.shape)),)
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = Tensor._make(np.transpose(x.data, axes), (x,), "transpose")
    out._backward = lambda g: ((x, np.transpose(g, inv)),)
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    out = Tensor._make(np.concatenate([t.data for t in xs], axis=axis), xs, "concat")

    def _bw(g):
        parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(zip(xs, parts))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules over leading dimensions."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor._make(np.matmul(a.data, b.data), (a, b), "matmul")

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ((a, ga), (b, gb))

    out._backward = _bw
    return out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (c_in, h, w) or batched (n, c_in, h, w); ``kernels`` is
    (c_out, c_in, kh, kw).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (c,h,w)/(n,c,h,w) input and 4-d kernels, got {x.shape}, {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, ho, wo, c, kh, kw) -> rows of the im2col matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(co, -1)
    res = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    res = np.ascontiguousarray(res)
    out = Tensor._make(res if batched else res[0], (x, kernels), "conv2d")

    def _bw(g):
        gb = g if batched else g[None]
        gm = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gk = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            if not batched:
                gx = gx[0]
        return ((x, gx), (kernels, gk))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._make(y, (x,), "softmax")

    def _bw(g):
        return ((x, y * (g - (g * y).sum(axis=-1, keepdims=True))),)

    out._backward = _bw
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    d = x.shape[-1]
    v64 = x.data.astype(np.float64)
    mu = v64.mean(axis=-1, keepdims=True)
    var = ((v64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((v64 - mu) * inv).astype(x.dtype)
    inv = inv.astype(x.dtype)
    out = Tensor._make(xhat * gamma.data + beta.data, (x, gamma, beta), "layernorm")

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return ((x, gx), (gamma, ggamma), (beta, gbeta))

    out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, training: bool, rng_seed: int | Sequence[int] = 0) -> Tensor:
    """Inverted dropout with a mask drawn from a generator seeded by ``rng_seed``.

    ``rng_seed`` may be a tuple such as (run seed, layer id, step) so that
    every call site gets its own reproducible stream.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(rng_seed)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = Tensor._make(x.data * keep, (x,), "dropout")
    out._backward = lambda g: ((x, g * keep),)
    return out

