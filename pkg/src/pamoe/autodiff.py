"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order. Leaves that the loss does not reach
keep an all-zero gradient when they are passed through ``leaves=``, which is
what makes gradient isolation between experts checkable bit for bit.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "tensor", "parameter", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "tanh",
    "sigmoid", "relu", "sum", "mean", "reshape", "swapaxes", "concat",
    "stack", "take", "index", "minimum", "clip", "softmax", "log_softmax",
    "softmax_temperature", "layer_norm", "cross_attention", "lstm_step",
    "lstm", "mean_pool", "kl_divergence", "straight_through", "detach",
    "backward", "zero_grad", "ShapeError", "DomainError",
]

LOG_FLOOR = 1e-12

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DomainError(ValueError):
    """An argument lies outside the op's mathematical domain."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (used for rollouts and frozen encoders)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.values)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    a = _as_tensor(a)
    x = a.values
    if floor is not None:
        clamped = x < floor
        x = np.maximum(x, floor)

        def bw(g):
            return (np.where(clamped, 0.0, g / x),)
        return _make(np.log(x), (a,), bw)
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.values <= b.values
    return _make(np.where(pick_a, a.values, b.values), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _make(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 1 or bv.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    k_a = av.shape[-1]
    k_b = bv.shape[-2] if bv.ndim >= 2 else bv.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul inner dims disagree: {av.shape} x {bv.shape}")
    if av.ndim > 2 and bv.ndim == 2:
        # fold leading dims so BLAS sees one large GEMM
        lead = av.shape[:-1]
        a_flat = av.reshape(-1, k_a)
        out = (a_flat @ bv).reshape(lead + (bv.shape[1],))

        def bw_flat(g):
            g_flat = g.reshape(-1, bv.shape[1])
            return (g_flat @ bv.T).reshape(av.shape), a_flat.T @ g_flat
        return _make(out, (a, b), bw_flat)
    out = av @ bv

    def bw(g):
        a2 = av if av.ndim > 1 else av[None, :]
        b2 = bv if bv.ndim > 1 else bv[:, None]
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = ga[..., 0, :]
        if bv.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)
    return _make(out, (a, b), bw)


# ---------------------------------------------------------------- reductions & shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _make(np.swapaxes(a.values, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.values for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    n = len(xs)
    return _make(np.stack([x.values for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(table, ids) -> Tensor:
    """Row gather ``table[ids]``; repeated ids accumulate gradient."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)
    return _make(table.values[ids], (table,), bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)


def index(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return _make(a.values[idx], (a,), bw)


def detach(a) -> Tensor:
    return Tensor(_as_tensor(a).values)


def straight_through(value, surrogate) -> Tensor:
    """Forward returns ``value`` exactly; backward routes gradient into ``surrogate``.

    ``value`` is a plain array (the hard quantity); its shape must match.
    """
    surrogate = _as_tensor(surrogate)
    v = np.asarray(value, dtype=np.float64)
    if v.shape != surrogate.shape:
        raise ShapeError(f"straight_through shapes differ: {v.shape} vs {surrogate.shape}")
    return _make(v.copy(), (surrogate,), lambda g: (g,))


# ---------------------------------------------------------------- nn primitives

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), bw)


def softmax_temperature(logits, tau: float, axis: int = -1) -> Tensor:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return softmax(mul(logits, 1.0 / tau), axis=axis)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)
    out = _make(xhat, (a,), bw)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def cross_attention(q, k, v, scale: float | None = None) -> Tensor:
    """Scaled dot-product attention of one query against one or more keys.

    ``q`` has shape ``(..., d)``; ``k`` and ``v`` are ``(..., d)`` for a single
    key or ``(..., M, d)`` for M keys. With a single key the output is ``v``.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    single = k.ndim == q.ndim
    if single:
        k = reshape(k, k.shape[:-1] + (1, d))
        v = reshape(v, v.shape[:-1] + (1, d))
    if k.shape != v.shape:
        raise ShapeError(f"key/value shapes differ: {k.shape} vs {v.shape}")
    qe = reshape(q, q.shape[:-1] + (1, d))                   # (..., 1, d)
    scores = mul(matmul(qe, swapaxes(k, -1, -2)), scale)     # (..., 1, M)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)                                 # (..., 1, d)
    return reshape(out, q.shape)


def lstm_step(x, state, params) -> tuple[Tensor, Tensor]:
    """One LSTM cell update. ``params`` = (W_x [e,4d], W_h [d,4d], b [4d]).

    Gate layout along the 4d axis: input, forget, cell candidate, output.
    """
    h, c = state
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    w_x, w_h, b = params
    d = h.shape[-1]
    if w_x.shape[0] != x.shape[-1] or w_h.shape != (d, 4 * d) or c.shape[-1] != d:
        raise ShapeError(
            f"lstm widths inconsistent: x {x.shape}, h {h.shape}, c {c.shape}, "
            f"W_x {w_x.shape}, W_h {w_h.shape}")
    z = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    i = sigmoid(z[..., 0:d])
    f = sigmoid(z[..., d:2 * d])
    g = tanh(z[..., 2 * d:3 * d])
    o = sigmoid(z[..., 3 * d:4 * d])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm(xs: Sequence[Tensor], layers, state=None):
    """Run a stacked LSTM over a sequence; returns (final top h, per-layer states)."""
    n_layers = len(layers)
    batch_shape = _as_tensor(xs[0]).shape[:-1]
    if state is None:
        state = []
        for w_x, w_h, b in layers:
            d = w_h.shape[0]
            state.append((Tensor(np.zeros(batch_shape + (d,))),
                          Tensor(np.zeros(batch_shape + (d,)))))
    state = list(state)
    top = None
    for x in xs:
        inp = x
        for layer in range(n_layers):
            state[layer] = lstm_step(inp, state[layer], layers[layer])
            inp = state[layer][0]
        top = inp
    return top, state


def mean_pool(xs) -> Tensor:
    """Elementwise mean of a nonempty sequence of equal-width vectors.

    Also accepts a single tensor whose leading axis indexes the sequence.
    """
    if isinstance(xs, Tensor):
        if xs.shape[0] == 0:
            raise DomainError("mean_pool of an empty sequence")
        return mean(xs, axis=0)
    xs = list(xs)
    if not xs:
        raise DomainError("mean_pool of an empty sequence")
    width = _as_tensor(xs[0]).shape
    if any(_as_tensor(x).shape != width for x in xs):
        raise ShapeError("mean_pool inputs must share a width")
    return mean(stack(xs, axis=0), axis=0)


def kl_divergence(p, q, axis: int = -1, check: bool = True) -> Tensor:
    """KL(p || q) = sum p log(p / q) with q floored at 1e-12 inside the log.

    Terms with p == 0 contribute exactly zero.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl shapes differ: {p.shape} vs {q.shape}")
    if check:
        for name, t in (("p", p), ("q", q)):
            if np.any(t.values < -1e-9) or np.any(np.abs(t.values.sum(axis=axis) - 1.0) > 1e-9):
                raise DomainError(f"{name} is not a probability vector")
    pv = p.values
    safe_p = np.where(pv > 0, pv, 1.0)
    log_p = np.log(safe_p)
    qv = np.maximum(q.values, LOG_FLOOR)
    q_clamped = q.values < LOG_FLOOR
    log_q = np.log(qv)
    terms = np.where(pv > 0, pv * (log_p - log_q), 0.0)
    out = terms.sum(axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        gp = np.where(pv > 0, g * (log_p - log_q + 1.0), 0.0)
        gq = np.where(q_clamped, 0.0, -g * pv / qv)
        return gp, gq
    return _make(out, (p, q), bw)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.values)


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    If ``leaves`` is given, their gradients are reset to exact zeros first, so
    any leaf the loss does not depend on ends with a bitwise-zero gradient.
    """
    if loss.values.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        zero_grad(leaves)
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
