"""Small reverse-mode autodiff engine on top of numpy float64 arrays.

Every op creates a new :class:`Tensor` that remembers its parents and a
backward closure. Tensors get a monotonically increasing tape id at
creation, so sorting the ancestors of a loss by id gives a valid reverse
topological order without keeping a global tape alive between steps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, CapabilityError, NumericError

_ids = itertools.count()


class UnsupportedOpError(CapabilityError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, rule: Callable[[np.ndarray], None]) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _op=op)
    if req:
        out._backward = rule
    return out


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen.add(t.id)
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.id, reverse=True)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if not t._parents:
            t._accum(g)
            continue
        if t._backward is None:
            raise UnsupportedOpError(f"no backward rule for op {t._op!r}")
        # backward closures push into parents via the grads dict
        for p, pg in t._backward(g):
            if not p.requires_grad or pg is None:
                continue
            pg = _unbroadcast(pg, p.data.shape)
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg


# ----------------------------------------------------------------- ops


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ArgumentError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: ((a, g), (b, g)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul", lambda g: ((a, g * b.data), (b, g * a.data)))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), "reciprocal", lambda g: ((a, -g * out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max with a constant; gradient flows where ``a > c``."""
    keep = a.data > c
    return _make(np.where(keep, a.data, c), (a,), "maximum", lambda g: ((a, g * keep),))


def relu(a: Tensor) -> Tensor:
    return maximum(a, 0.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ArgumentError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ArgumentError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold batch axes into one gemm
        k = a.shape[-1]

        def rule(g):
            a2 = a.data.reshape(-1, k)
            g2 = g.reshape(-1, g.shape[-1])
            return ((a, (g2 @ b.data.T).reshape(a.shape)), (b, a2.T @ g2))

        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        return _make(out, (a, b), "matmul", rule)

    def rule(g):
        return (
            (a, g @ np.swapaxes(b.data, -1, -2)),
            (b, np.swapaxes(a.data, -1, -2) @ g),
        )

    return _make(a.data @ b.data, (a, b), "matmul", rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: ((a, np.transpose(g, inv)),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: ((a, g.reshape(old)),))


def getitem(a: Tensor, idx) -> Tensor:
    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return ((a, full),)

    return _make(a.data[idx], (a,), "slice", rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(zip(tensors, np.split(g, cuts, axis=axis)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", rule)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: ((a, 2.0 * g * a.data),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def rule(g):
        gx = g if gamma is None else g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        out = [(x, dx)]
        if gamma is not None:
            out.append((gamma, g * xhat))
        if beta is not None:
            out.append((beta, g))
        return tuple(out)

    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [p for p in (x, gamma, beta) if p is not None]
    return _make(y, parents, "layer_norm", rule)


def log_sigmoid(a: Tensor) -> Tensor:
    z = a.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    sig_neg = np.exp(-np.logaddexp(0.0, z))  # sigmoid(-z), stable
    return _make(out, (a,), "log_sigmoid", lambda g: ((a, g * sig_neg),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return ((a, s * (g - (g * s).sum(axis=axis, keepdims=True))),)

    return _make(s, (a,), "softmax", rule)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; the usual mlp building block."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return affine(relu(affine(x, w1, b1)), w2, b2)


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-9
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> AdamState:
    """One Adam update in place. Weight decay is the coupled (L2) form, as in torch.optim.Adam."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ArgumentError("Adam state does not match parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ArgumentError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at Adam step {t}", step=t)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -------------------------------------------------------- gradient check


def numerical_grad(f: Callable[[], float], param: Tensor, h: float = 1e-6) -> np.ndarray:
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        out[k] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-6,
    floor: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    The relative error is ``|fd - bp| / max(floor, |fd|, |bp|)``, so entries
    where both gradients are tiny are not blown up by the division.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        af = a.reshape(-1)
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            fp = loss_fn().item()
            flat[k] = old - h
            fm = loss_fn().item()
            flat[k] = old
            fd = (fp - fm) / (2 * h)
            diff = abs(fd - af[k])
            worst = max(worst, diff / max(floor, abs(fd), abs(af[k])))
    return worst
