"""Small define-by-run autodiff engine over float64 numpy arrays.

Only the operations needed by the grid detectors and their losses are
provided. Every op builds a node holding its parents and a closure that maps
the output gradient to parent gradients; ``backward`` walks the graph in
reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class InvalidInputError(ValueError):
    """Raised when an op receives arguments violating its shape contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise InvalidInputError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise InvalidInputError(f"leaky_relu slope must be in [0, 1), got {slope}")
    pos = x.data >= 0
    factor = np.where(pos, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))

def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def sigmoid_cross_entropy(target, logit: Tensor) -> Tensor:
    """Elementwise binary cross entropy on logits, target held constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logit.shape:
        raise InvalidInputError(f"sigmoid_cross_entropy: shape mismatch {t.shape} vs {logit.shape}")
    z = logit.data
    out = np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (logit,), lambda g: (g * (expit(z) - t),))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise InvalidInputError(str(e)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, idx) -> Tensor:
    """Basic (view) indexing, differentiable."""
    out = x.data[idx]

    def fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(np.array(out), (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise InvalidInputError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- conv / pool

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation over NCHW input via im2col."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise InvalidInputError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise InvalidInputError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if bias.shape != (o,):
        raise InvalidInputError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or pad < 0:
        raise InvalidInputError("conv2d: stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise InvalidInputError("conv2d: kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise InvalidInputError("conv2d: output size is not an integer for this stride")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0

    # cols: [n, c*kh*kw, ho*wo], channel-major so the matmul lands in NCHW directly
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = np.empty((n, c, kh, kw, ho, wo))
        for a in range(kh):
            for b in range(kw):
                cols[:, :, a, b] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(n, o, ho, wo)

    def fn(g):
        g = g.reshape(n, o, ho * wo)
        gk = (g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g
            if pointwise:
                gx = gcols.reshape(n, c, h, w)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, hp, wp))
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, a, b]
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    return _make(out, (x, kernel, bias), fn)


def max_pool2d(x: Tensor, k: int) -> Tensor:
    if x.data.ndim != 4:
        raise InvalidInputError("max_pool2d expects NCHW input")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise InvalidInputError(f"max_pool2d: spatial dims {(h, w)} not divisible by {k}")
    if k == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    views = [x.data[:, :, a::k, b::k] for a in range(k) for b in range(k)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def fn(g):
        # route to the first maximum in row-major window scan order
        gx = np.empty((n, c, h, w))
        free = np.ones(out.shape, dtype=bool)
        for idx, v in enumerate(views):
            hit = np.equal(v, out)
            hit &= free
            free ^= hit
            a, b = divmod(idx, k)
            np.multiply(g, hit, out=gx[:, :, a::k, b::k])
        return (gx,)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState):
    """One Adam update, in place on ``params`` using their ``grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise InvalidInputError("optimizer state does not match parameter list")
    for p in params:
        if p.grad is None:
            raise InvalidInputError(f"parameter {p.name or p.shape} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        optimizer_step(self.params, self.state)
