"""Dense tensors with a dynamic reverse-mode tape.

Storage is a contiguous row-major numpy buffer. Every op that touches a
tensor requiring grad records its parents and a backward closure; the graph
is the set of such records reachable from the loss, ordered topologically
at ``backward`` time.

Training runs in float32. ``precision("float64")`` (or ``BG_PRECISION=float64``
in the environment) switches newly created tensors to float64, which is what
the tight gradient-check tolerances use.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = _DTYPES[os.environ.get("BG_PRECISION", "float32")]


def get_dtype():
    return _dtype


def set_dtype(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily change the dtype used for new tensors."""
    prev = _dtype
    set_dtype(name)
    try:
        yield
    finally:
        globals()["_dtype"] = prev


def _contiguous(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return a if a.flags.c_contiguous else a.copy(order="C")


class Tensor:
    """A numpy buffer plus an optional gradient and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = _contiguous(np.asarray(data, dtype=dtype or _dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _contiguous(np.asarray(data))
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_str(t: Tensor) -> str:
    return "x".join(str(d) for d in t.shape) or "scalar"


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix (shared across ``a``'s leading axes) or has
    the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {_shape_str(a)} by {_shape_str(b)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {_shape_str(a)} vs {_shape_str(b)}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def backward(g, need):
        da = db = None
        if need[0]:
            da = np.matmul(g, np.swapaxes(B, -1, -2))
        if need[1]:
            if B.ndim == 2 and A.ndim > 2:
                k, n = B.shape
                db = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = np.matmul(np.swapaxes(A, -1, -2), g)
        return da, db

    return Tensor._result(out, (a, b), backward, "matmul")


def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is a last-axis bias broadcast onto ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise DimensionError(f"{op}: cannot broadcast {_shape_str(b)} onto {_shape_str(a)}")


def _reduce_bias(g: np.ndarray, d: int) -> np.ndarray:
    return g.reshape(-1, d).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "add")

    def backward(g, need):
        gb = None
        if need[1]:
            gb = _reduce_bias(g, b.shape[0]) if bias else g
        return (g if need[0] else None), gb

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "mul")
    A, B = a.data, b.data

    def backward(g, need):
        ga = g * B if need[0] else None
        gb = None
        if need[1]:
            gb = _reduce_bias(g * A, B.shape[0]) if bias else g * A
        return ga, gb

    return Tensor._result(A * B, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g, need):
        return (g * c,)

    return Tensor._result(x.data * c, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    X = x.data
    pos = X > 0

    def backward(g, need):
        return (g * pos,)

    return Tensor._result(np.where(pos, X, 0).astype(X.dtype, copy=False), (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    X = x.data
    u = _GELU_C * (X + 0.044715 * X**3)
    t = np.tanh(u)
    out = 0.5 * X * (1.0 + t)

    def backward(g, need):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X**2)
        d = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du
        return (g * d,)

    return Tensor._result(out, (x,), backward, "gelu")


_ELEMENTWISE = {"relu", "gelu-tanh-approx", "add", "mul", "scale"}


def elementwise(x: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch by name: unary ``relu``/``gelu-tanh-approx``, binary
    ``add``/``mul`` (``other`` a Tensor), or ``scale`` (``other`` a float)."""
    if kind == "relu":
        return relu(x)
    if kind in ("gelu", "gelu-tanh-approx"):
        return gelu(x)
    if kind == "add":
        return add(x, _wrap(other))
    if kind == "mul":
        return mul(x, _wrap(other))
    if kind == "scale":
        return scale(x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {sorted(_ELEMENTWISE)}")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: last axis has length 0")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {_shape_str(gain)} / bias {_shape_str(bias)} do not match last axis {d}"
        )
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g, need):
        gx = gg = gb = None
        if need[0]:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if need[1]:
            gg = _reduce_bias(g * xhat, d)
        if need[2]:
            gb = _reduce_bias(g, d)
        return gx, gg, gb

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected b x c logits, got {_shape_str(logits)}")
    b, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise DimensionError(f"softmax_cross_entropy: {t.shape[0]} targets for {b} rows")
    if t.size and (t.min() < 0 or t.max() >= c):
        bad = int(t[(t < 0) | (t >= c)][0])
        raise IndexError(f"softmax_cross_entropy: target {bad} outside [0, {c})")
    Z = logits.data
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(b)
    loss = -logp[rows, t].mean()

    def backward(g, need):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / b),)

    return Tensor._result(np.asarray(loss, dtype=Z.dtype), (logits,), backward, "softmax_xent")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {_shape_str(x)} -> {shape}: {exc}") from None

    def backward(g, need):
        return (g.reshape(src),)

    return Tensor._result(out, (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))

    def backward(g, need):
        return (np.transpose(g, inv),)

    return Tensor._result(np.transpose(x.data, axes), (x,), backward, "permute")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``."""
    idx = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        bad = int(idx[(idx < 0) | (idx >= v)][0])
        raise IndexError(f"embedding: token id {bad} outside vocabulary of size {v}")

    def backward(g, need):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._result(table.data[idx], (table,), backward, "embedding")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with key positions > query position masked."""
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal_softmax: expected ... x T x T, got {_shape_str(scores)}")
    T = scores.shape[-1]
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    S = np.where(future, -np.inf, scores.data)
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    P = (E / E.sum(axis=-1, keepdims=True)).astype(scores.data.dtype, copy=False)

    def backward(g, need):
        return (P * (g - (g * P).sum(axis=-1, keepdims=True)),)

    return Tensor._result(P, (scores,), backward, "causal_softmax")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g, need):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------


def build_graph(root: Tensor) -> list:
    """Topologically ordered tensors reachable from ``root`` (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``.

    With ``wrt`` given, gradients are propagated only along paths reaching
    those leaves; no other leaf receives a buffer.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = build_graph(loss)
    targets = None if wrt is None else {id(t) for t in wrt}
    needs = {}
    for node in order:
        if node.is_leaf:
            needs[id(node)] = node.requires_grad and (targets is None or id(node) in targets)
        else:
            needs[id(node)] = any(needs[id(p)] for p in node._parents)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        key = id(node)
        if not needs[key]:
            continue
        g = grads.pop(key, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        need = tuple(needs[id(p)] for p in node._parents)
        for parent, pg, nd in zip(node._parents, node._backward(g, need), need):
            if not nd or pg is None:
                continue
            pk = id(parent)
            pg = np.asarray(pg, dtype=parent.data.dtype)
            grads[pk] = pg if pk not in grads else grads[pk] + pg


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Evaluation happens in float64 on a float64 copy of ``x`` so that the
    oracle's rounding error stays well below the step's truncation error.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    base = x.data.astype(np.float64).reshape(-1)
    out = np.zeros_like(base)
    with precision("float64"):
        for i in range(base.size):
            orig = base[i]
            base[i] = orig + h
            fp = float(f(Tensor(base.reshape(x.shape))).data)
            base[i] = orig - h
            fm = float(f(Tensor(base.reshape(x.shape))).data)
            base[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return Tensor(out.reshape(x.shape), dtype=np.float64)


def rel_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)
