"""Finite-difference checks for every differentiable op and full model losses.

Each case builds a scalar function of one input tensor, differentiates it
with ``backward`` at the active precision, and compares against
``finite_diff_grad`` (evaluated in float64).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import tensor as T
from .models import MLP, ModelConfig, TinyTransformer
from .tensor import Tensor, finite_diff_grad, rel_error


@dataclass
class CaseResult:
    op: str
    seed: int
    error: float


def _autodiff(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(x, requires_grad=True)
    T.backward(f(t))
    return t.grad


def _check(op, seed, f, x, h) -> CaseResult:
    x = Tensor(x)
    g = _autodiff(f, x.data)
    return CaseResult(op, seed, rel_error(g, finite_diff_grad(f, x, h).data))


def _dims(rng, k, lo=1, hi=8):
    return [int(v) for v in rng.integers(lo, hi + 1, size=k)]


def op_cases(seed: int, h: float) -> List[CaseResult]:
    rng = np.random.default_rng(seed)
    dt = T.get_dtype()
    C = lambda a: Tensor(a, dtype=dt)  # noqa: E731
    out = []
    m, k, n = _dims(rng, 3)
    A, B = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    W = C(rng.normal(size=(m, n)))
    out.append(_check("matmul.a", seed, lambda a: T.tsum(T.mul(T.matmul(a, C(B)), W)), A, h))
    out.append(_check("matmul.b", seed, lambda b: T.tsum(T.mul(T.matmul(C(A), b), W)), B, h))

    r, c = _dims(rng, 2)
    X = rng.normal(size=(r, c))
    U = C(rng.normal(size=(r, c)))
    # keep relu inputs away from the kink so the difference quotient is exact
    Xr = np.where(np.abs(X) < 10 * h, X + 20 * h, X)
    out.append(_check("relu", seed, lambda x: T.tsum(T.mul(T.relu(x), U)), Xr, h))
    out.append(_check("gelu", seed, lambda x: T.tsum(T.mul(T.gelu(x), U)), X * 2, h))
    bias = rng.normal(size=c)
    out.append(_check("add.bias", seed, lambda b: T.tsum(T.mul(T.add(C(X), b), U)), bias, h))
    Y = rng.normal(size=(r, c))
    out.append(_check("mul", seed, lambda x: T.tsum(T.mul(T.mul(x, C(Y)), U)), X, h))
    out.append(_check("mul.bias", seed, lambda b: T.tsum(T.mul(T.mul(C(X), b), U)), bias, h))
    out.append(_check("scale", seed, lambda x: T.tsum(T.mul(T.scale(x, 0.37), U)), X, h))

    # at d = 2 the normalized row is +-1 whatever x is; the gradient is O(eps)
    d = max(c, 3)
    Xl = rng.normal(size=(r, d))
    g, b = rng.normal(size=d), rng.normal(size=d)
    V = C(rng.normal(size=(r, d)))
    out.append(_check("layer_norm.x", seed, lambda x: T.tsum(T.mul(T.layer_norm(x, C(g), C(b)), V)), Xl, h))
    out.append(_check("layer_norm.gain", seed, lambda t: T.tsum(T.mul(T.layer_norm(C(Xl), t, C(b)), V)), g, h))
    out.append(_check("layer_norm.bias", seed, lambda t: T.tsum(T.mul(T.layer_norm(C(Xl), C(g), t), V)), b, h))

    bsz, cls = _dims(rng, 2, 1, 8)
    cls = max(cls, 2)
    Z = rng.normal(size=(bsz, cls))
    y = rng.integers(cls, size=bsz)
    out.append(_check("softmax_xent", seed, lambda z: T.softmax_cross_entropy(z, y), Z, h))

    a1, a2, a3 = _dims(rng, 3, 1, 4)
    P = rng.normal(size=(a1, a2, a3))
    Q = C(rng.normal(size=(a3, a1, a2)))
    out.append(_check("permute", seed, lambda p: T.tsum(T.mul(T.permute(p, (2, 0, 1)), Q)), P, h))
    R = C(rng.normal(size=(a1 * a2, a3)))
    out.append(_check("reshape", seed, lambda p: T.tsum(T.mul(T.reshape(p, (a1 * a2, a3)), R)), P, h))

    vocab, dim = _dims(rng, 2, 2, 8)
    E = rng.normal(size=(vocab, dim))
    ids = rng.integers(vocab, size=(2, 3))
    G = C(rng.normal(size=(2, 3, dim)))
    out.append(_check("embedding", seed, lambda e: T.tsum(T.mul(T.embedding(e, ids), G)), E, h))

    L = int(rng.integers(2, 8))
    S = rng.normal(size=(2, L, L))
    H = C(rng.normal(size=(2, L, L)))
    out.append(_check("causal_softmax", seed, lambda s: T.tsum(T.mul(T.causal_softmax(s), H)), S, h))
    return out


def _swap_loss(model, name: str, batch):
    reg = model.registry

    def f(t: Tensor) -> Tensor:
        saved = reg._layers[name]
        reg._layers[name] = t
        try:
            return model.loss(batch)
        finally:
            reg._layers[name] = saved

    return f


def model_cases(seed: int, h: float) -> List[CaseResult]:
    """Full MLP loss (every layer) and tiny-transformer loss (one layer per
    seed, cycling through the registry)."""
    rng = np.random.default_rng(10_000 + seed)
    out = []
    widths = [int(rng.integers(2, 7)), int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 6))]
    mlp = MLP(ModelConfig(kind="mlp", widths=widths, activation="gelu", seed=seed))
    batch = (rng.normal(size=(5, widths[0])), rng.integers(widths[-1], size=5))
    T.backward(mlp.loss(batch))
    for name, p, _ in mlp.registry.entries():
        fd = finite_diff_grad(_swap_loss(mlp, name, batch), p, h).data
        out.append(CaseResult(f"mlp:{name}", seed, rel_error(p.grad, fd)))
    mlp.registry.zero_grad()

    cfg = ModelConfig(kind="tiny-transformer", vocab=8, d_model=8, n_blocks=2, n_heads=1 + seed % 2, d_ff=12, context=6, seed=seed)
    tf = TinyTransformer(cfg)
    toks = rng.integers(8, size=(2, 7))
    batch = (toks[:, :-1], toks[:, 1:])
    names = tf.registry.names()
    name = names[seed % len(names)]
    p = tf.registry[name]
    T.backward(tf.loss(batch), wrt=[p])
    fd = finite_diff_grad(_swap_loss(tf, name, batch), p, h).data
    out.append(CaseResult(f"transformer:{name}", seed, rel_error(p.grad, fd)))
    tf.registry.zero_grad()
    return out


def run_suite(n_seeds: int = 100, dtype: str = "float32", h: float = 1e-5) -> List[CaseResult]:
    results: List[CaseResult] = []
    with T.precision(dtype):
        for seed in range(n_seeds):
            results += op_cases(seed, h)
            results += model_cases(seed, h)
    return results


def worst_by_op(results: List[CaseResult]) -> Dict[str, float]:
    worst: Dict[str, float] = {}
    for r in results:
        key = r.op.split(":")[0]
        worst[key] = max(worst.get(key, 0.0), r.error)
    return worst
