"""Small reverse-mode autodiff on top of numpy.

Only what the segmentation network needs is here: elementwise arithmetic
with numpy broadcasting, matmul, NHWC ``conv2d``, bilinear resizing, softmax,
clamped cross-entropy, cosine similarity, and a handful of reductions.
Every array is float64.

A ``Tensor`` records its parents and a backward closure only when at least
one input requires a gradient, so teacher / evaluation passes build no graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    # -- construction helpers -------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` and, if any parent needs it, attach a gradient closure.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that do not need one).
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring it.

    Raises ``ValueError`` for a non-scalar loss. A loss with no history
    (nothing requires grad) is a silent no-op.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), "clamp", lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="bad axes permutation")
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), "sum", bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(x, axis: int) -> Tensor:
    """Max along ``axis``; the sub-gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), "max", bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, "concat", bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``a`` is (..., n, k) and ``b`` is (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), "softmax",
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(probs, target: np.ndarray, eps: float = 1e-9) -> Tensor:
    """Per-row ``-log p[target]`` for probabilities ``probs`` of shape (n, C).

    Probabilities are clamped to ``[eps, 1 - eps]``; outside that band the
    gradient is zero. Returns an (n,) tensor of losses.
    """
    probs = as_tensor(probs)
    target = np.asarray(target)
    if probs.ndim != 2 or target.shape != probs.shape[:1]:
        raise ShapeError("cross_entropy", probs.shape, target.shape)
    rows = np.arange(probs.shape[0])
    p = probs.data[rows, target]
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p >= eps) & (p <= 1.0 - eps)

    def bw(g):
        gp = np.zeros_like(probs.data)
        gp[rows, target] = np.where(inside, -g / pc, 0.0)
        return (gp,)

    return _make(-np.log(pc), (probs,), "cross_entropy", bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """``x / ||x||`` along ``axis``; zero-norm rows map to zero with zero gradient."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    alive = norm > 0
    safe = np.where(alive, norm, 1.0)
    u = np.where(alive, x.data / safe, 0.0)

    def bw(g):
        proj = (g * u).sum(axis=axis, keepdims=True)
        return (np.where(alive, (g - u * proj) / safe, 0.0),)

    return _make(u, (x,), "l2_normalize", bw)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity. Two vectors give a scalar; (n, D) and (m, D) give (n, m).

    Pairs involving a zero vector score 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    if a.ndim == 1 and b.ndim == 1:
        return sum_(l2_normalize(a) * l2_normalize(b))
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------------------
# convolution and resizing (NHWC)
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an (O, C, kh, kw) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, h, w, c = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win[:, :ho, :wo]).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    parents: tuple = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias")
        out = out + bias.data
        parents = (x, weight, bias)
    out = out.reshape(n, ho, wo, o)

    def bw(g):
        g2 = g.reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, hp, wp, c))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _make(out, parents, "conv2d", bw)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix (half-pixel centres)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_resize(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of an NHWC tensor to ``size = (H_out, W_out)``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("bilinear_resize", x.shape, size)
    ah = interp_matrix(x.shape[1], size[0])
    aw = interp_matrix(x.shape[2], size[1])
    # out[n, o, p, c] = sum_h sum_w ah[o, h] x[n, h, w, c] aw[p, w]
    t = np.matmul(aw, x.data)                        # (n, h, p, c)
    out = np.matmul(ah, t.transpose(0, 2, 1, 3))     # (n, p, o, c)
    out = out.transpose(0, 2, 1, 3)

    def bw(g):
        t = np.matmul(ah.T, g.transpose(0, 2, 1, 3))     # (n, p, h, c)
        return (np.matmul(aw.T, t.transpose(0, 2, 1, 3)),)

    return _make(np.ascontiguousarray(out), (x,), "bilinear_resize", bw)


def bilinear_upsample(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    return bilinear_resize(x, (x.shape[1] * factor, x.shape[2] * factor))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class SgdConfig:
    base_lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    total_iters: int = 1
    poly_power: float = 0.8
    clip_norm: float | None = None      # global gradient-norm cap, off when None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.total_iters < 1:
            raise ValueError("total_iters must be a positive integer")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def poly_lr(config: SgdConfig, it: int) -> float:
    if not 0 <= it <= config.total_iters:
        raise ValueError(f"iteration {it} outside [0, {config.total_iters}]")
    return config.base_lr * (1.0 - it / config.total_iters) ** config.poly_power


class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and a polynomial LR decay."""

    def __init__(self, params: Iterable[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, it: int) -> float:
        cfg = self.config
        if not 0 <= it < cfg.total_iters:
            raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
        lr = poly_lr(cfg, it)
        scale = 1.0
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.momentum:
                buf = self.buffers[i]
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                self.buffers[i] = buf
                g = buf
            p.data = p.data - lr * g
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"momentum.{i}": b for i, b in enumerate(self.buffers) if b is not None}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(len(self.params)):
            self.buffers[i] = arrays.get(f"momentum.{i}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], config: SgdConfig,
             it: int, buffers: Sequence[np.ndarray | None] | None = None
             ) -> tuple[list[np.ndarray], list[np.ndarray | None]]:
    """Functional form of one ``SGD`` step: returns new params and momentum buffers."""
    tensors = [Tensor(p.copy()) for p in params]
    for t, g in zip(tensors, grads):
        t.grad = np.asarray(g, dtype=DTYPE)
    opt = SGD(tensors, config)
    if buffers is not None:
        opt.buffers = [None if b is None else b.copy() for b in buffers]
    opt.step(it)
    return [t.data for t in tensors], opt.buffers
