"""Central finite-difference checks for every differentiable op.

Each op has a case generator that draws random inputs (kept away from kinks
for relu, minimum and clip) and returns a function of the inputs. Non-scalar
outputs are reduced with a fixed random projection before differencing.

``straight_through`` is absent on purpose: its forward value ignores the
surrogate, so it has no finite-difference derivative to compare against.
"""
from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import autodiff as ad

__all__ = ["gradcheck", "GradcheckResult", "OP_CASES", "check_op", "check_all_ops"]


@dataclasses.dataclass(frozen=True)
class GradcheckResult:
    op: str
    cases: int
    worst_rel_err: float

    @property
    def ok(self) -> bool:
        return self.worst_rel_err < 1e-4


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    diff = float(np.linalg.norm(a - n))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    if scale < 1e-8:
        # both gradients vanish; compare absolutely
        return diff
    return diff / scale


def gradcheck(fn: Callable[..., ad.Tensor], inputs: list[np.ndarray], eps: float = 1e-5,
              rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    rng = rng or np.random.default_rng(0)
    leaves = [ad.parameter(x.copy()) for x in inputs]
    out = fn(*leaves)
    proj = rng.normal(size=out.shape)

    def scalar(vals) -> float:
        with ad.no_grad():
            o = fn(*[ad.tensor(v) for v in vals])
        return float(np.sum(o.values * proj))

    loss = ad.sum(ad.mul(out, proj))
    ad.backward(loss, leaves=leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = np.zeros_like(inputs[i])
        flat = num.reshape(-1)
        for j in range(flat.size):
            up = [x.copy() for x in inputs]
            dn = [x.copy() for x in inputs]
            up[i].reshape(-1)[j] += eps
            dn[i].reshape(-1)[j] -= eps
            flat[j] = (scalar(up) - scalar(dn)) / (2 * eps)
        worst = max(worst, _rel_err(leaf.grad, num))
    return worst


def _away(rng, shape, kinks=(0.0,), gap=1e-2):
    x = rng.normal(size=shape)
    for k in kinks:
        close = np.abs(x - k) < gap
        x[close] += np.sign(x[close] - k + 1e-12) * gap * 2
    return x


def _simplex(rng, shape):
    x = rng.uniform(0.05, 1.0, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


def _case_minimum(rng):
    a = rng.normal(size=(3, 4))
    b = a + _away(rng, (3, 4))
    return ad.minimum, [a, b]


def _case_lstm(rng):
    e, d = 3, 2
    x, h, c = rng.normal(size=(2, e)), rng.normal(size=(2, d)), rng.normal(size=(2, d))
    wx, wh, b = rng.normal(size=(e, 4 * d)), rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d)

    def f(x, h, c, wx, wh, b):
        hn, cn = ad.lstm_step(x, (h, c), (wx, wh, b))
        return ad.concat([hn, cn], axis=-1)
    return f, [x, h, c, wx, wh, b]


def _case_lstm_stack(rng):
    e, d = 2, 3
    xs = rng.normal(size=(3, 2, e))
    l1 = [rng.normal(size=(e, 4 * d)), rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d)]
    l2 = [rng.normal(size=(d, 4 * d)), rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d)]

    def f(xs, a, b, c, p, q, r):
        top, _ = ad.lstm([xs[t] for t in range(3)], [(a, b, c), (p, q, r)])
        return top
    return f, [xs] + l1 + l2


def _case_index(rng):
    idx = (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))
    return (lambda a: ad.index(a, idx)), [rng.normal(size=(3, 4))]


def _case_take(rng):
    ids = np.array([[0, 2], [2, 4]])
    return (lambda t: ad.take(t, ids)), [rng.normal(size=(5, 3))]


OP_CASES: dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]] = {
    "add": lambda r: (ad.add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (ad.sub, [r.normal(size=(3, 1)), r.normal(size=(3, 4))]),
    "mul": lambda r: (ad.mul, [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "div": lambda r: (ad.div, [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, (3, 4))
                               * r.choice([-1, 1], (3, 4))]),
    "neg": lambda r: (ad.neg, [r.normal(size=(5,))]),
    "exp": lambda r: (ad.exp, [r.normal(size=(3, 4))]),
    "log": lambda r: (ad.log, [r.uniform(0.1, 3.0, (3, 4))]),
    "tanh": lambda r: (ad.tanh, [r.normal(size=(3, 4))]),
    "sigmoid": lambda r: (ad.sigmoid, [r.normal(size=(3, 4)) * 3]),
    "relu": lambda r: (ad.relu, [_away(r, (3, 4))]),
    "minimum": _case_minimum,
    "clip": lambda r: ((lambda a: ad.clip(a, -0.5, 0.5)), [_away(r, (3, 4), (-0.5, 0.5))]),
    "matmul": lambda r: (ad.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    "sum": lambda r: ((lambda a: ad.sum(a, axis=1, keepdims=True)), [r.normal(size=(3, 4))]),
    "mean": lambda r: ((lambda a: ad.mean(a, axis=0)), [r.normal(size=(3, 4))]),
    "reshape": lambda r: ((lambda a: ad.reshape(a, (4, 3))), [r.normal(size=(3, 4))]),
    "swapaxes": lambda r: ((lambda a: ad.swapaxes(a, 0, 2)), [r.normal(size=(2, 3, 4))]),
    "concat": lambda r: ((lambda a, b: ad.concat([a, b], axis=-1)),
                         [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "stack": lambda r: ((lambda a, b: ad.stack([a, b], axis=1)),
                        [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "index": _case_index,
    "take": _case_take,
    "softmax": lambda r: ((lambda a: ad.softmax(a, axis=-1)), [r.normal(size=(3, 5)) * 2]),
    "log_softmax": lambda r: ((lambda a: ad.log_softmax(a, axis=-1)), [r.normal(size=(3, 5)) * 2]),
    "softmax_temperature": lambda r: ((lambda a: ad.softmax_temperature(a, 0.7)),
                                      [r.normal(size=(3, 5))]),
    "layer_norm": lambda r: ((lambda a, g, b: ad.layer_norm(a, g, b)),
                             [r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)]),
    "cross_attention": lambda r: (ad.cross_attention, [r.normal(size=(2, 4)), r.normal(size=(2, 3, 4)),
                                                       r.normal(size=(2, 3, 4))]),
    "lstm_step": _case_lstm,
    "lstm": _case_lstm_stack,
    "mean_pool": lambda r: (ad.mean_pool, [r.normal(size=(4, 3))]),
    "kl_divergence": lambda r: ((lambda p, q: ad.kl_divergence(p, q, check=False)),
                                [_simplex(r, (3, 5)), _simplex(r, (3, 5))]),
}


def check_op(name: str, cases: int = 100, seed: int = 0) -> GradcheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(cases):
        fn, inputs = OP_CASES[name](rng)
        worst = max(worst, gradcheck(fn, inputs, rng=rng))
    return GradcheckResult(name, cases, worst)


def check_all_ops(cases: int = 100, seed: int = 0) -> list[GradcheckResult]:
    return [check_op(name, cases, seed) for name in OP_CASES]
