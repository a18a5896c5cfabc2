"""Deterministic synthetic datasets.

* an order-2 Markov character stream with a computable entropy rate, for
  toy language-model pretraining;
* a Gaussian-mixture classification task and a rotated copy of it, for
  finetuning under domain shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import SpecError
from .models import read_container, write_container

DATA_MAGIC = b"BGDATA1\n"


# ---------------------------------------------------------------------------
# order-2 Markov character corpus
# ---------------------------------------------------------------------------


@dataclass
class CharSpec:
    vocab: int = 16
    length: int = 100_000
    alpha: float = 0.2  # Dirichlet concentration of each transition row
    seed: int = 0
    table: Optional[np.ndarray] = None  # explicit V x V x V transition table


@dataclass
class CharCorpus:
    vocab: int
    tokens: np.ndarray
    table: np.ndarray
    seed: int

    def entropy_rate(self) -> float:
        return markov2_entropy_rate(self.table)

    def split(self, frac: float = 0.9) -> Tuple[np.ndarray, np.ndarray]:
        cut = int(len(self.tokens) * frac)
        return self.tokens[:cut], self.tokens[cut:]


def _check_table(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    V = P.shape[0]
    if P.ndim != 3 or P.shape != (V, V, V):
        raise SpecError(f"transition table must be V x V x V, got {P.shape}")
    if not np.all(np.isfinite(P)) or (P < 0).any():
        raise SpecError("transition table has negative or non-finite entries")
    rows = P.sum(axis=2)
    bad = np.argwhere(np.abs(rows - 1.0) > 1e-9)
    if bad.size:
        a, b = bad[0]
        raise SpecError(f"transition row ({a},{b}) sums to {rows[a, b]:.6g}, not 1")
    return P


def markov_table(vocab: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    P = rng.dirichlet(np.full(vocab, alpha), size=(vocab, vocab))
    # Dirichlet draws with small alpha can underflow to exact zeros; keep the
    # chain ergodic
    P = P + 1e-6
    return P / P.sum(axis=2, keepdims=True)


def pair_stationary(P: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution over consecutive pairs ``(a, b)``."""
    V = P.shape[0]
    pi = np.full((V, V), 1.0 / (V * V))
    for _ in range(max_iter):
        nxt = np.einsum("ab,abc->bc", pi, P)
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    return pi


def markov2_entropy_rate(P: np.ndarray) -> float:
    """``-sum pi(a,b) P(c|a,b) log P(c|a,b)`` in nats."""
    P = _check_table(P)
    pi = pair_stationary(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        logP = np.where(P > 0, np.log(P), 0.0)
    return float(-(pi[:, :, None] * P * logP).sum())


def empirical_conditional_entropy(tokens: np.ndarray, vocab: int) -> float:
    t = np.asarray(tokens, dtype=np.int64)
    idx = (t[:-2] * vocab + t[1:-1]) * vocab + t[2:]
    tri = np.bincount(idx, minlength=vocab**3).reshape(vocab, vocab, vocab).astype(np.float64)
    pair = tri.sum(axis=2, keepdims=True)
    N = tri.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(tri > 0, tri * np.log(tri / pair), 0.0)
    return float(-h.sum() / N)


def gen_char_corpus(spec: CharSpec) -> CharCorpus:
    if spec.vocab < 2:
        raise SpecError("vocab must be at least 2")
    if spec.vocab > 64:
        raise SpecError("vocab is capped at 64 symbols")
    if spec.length < 3:
        raise SpecError("corpus length must be at least 3")
    rng = np.random.default_rng(spec.seed)
    if spec.table is not None:
        P = _check_table(spec.table)
        if P.shape[0] != spec.vocab:
            raise SpecError(f"table is for vocab {P.shape[0]}, spec says {spec.vocab}")
    else:
        if spec.alpha <= 0:
            raise SpecError("Dirichlet concentration must be positive")
        P = markov_table(spec.vocab, spec.alpha, rng)
    cdf = np.cumsum(P, axis=2)
    cdf[:, :, -1] = 1.0
    u = rng.random(spec.length)
    out = np.empty(spec.length, dtype=np.int64)
    out[0], out[1] = rng.integers(spec.vocab, size=2)
    a, b = int(out[0]), int(out[1])
    last = spec.vocab - 1
    for i in range(2, spec.length):
        c = int(np.searchsorted(cdf[a, b], u[i], side="right"))
        c = min(c, last)
        out[i] = c
        a, b = b, c
    return CharCorpus(vocab=spec.vocab, tokens=out, table=P, seed=spec.seed)


def deterministic_table(vocab: int) -> np.ndarray:
    """Zero-entropy chain: pair ``(a, b)`` always emits ``(a + b + 1) mod V``."""
    P = np.zeros((vocab, vocab, vocab))
    a, b = np.meshgrid(np.arange(vocab), np.arange(vocab), indexing="ij")
    P[a, b, (a + b + 1) % vocab] = 1.0
    return P


def uniform_table(vocab: int) -> np.ndarray:
    return np.full((vocab, vocab, vocab), 1.0 / vocab)


def lm_windows(tokens: np.ndarray, context: int) -> Tuple[np.ndarray, np.ndarray]:
    """Non-overlapping input/target windows of length ``context``."""
    t = np.asarray(tokens, dtype=np.int64)
    n = (len(t) - 1) // context
    if n < 1:
        raise SpecError(f"stream of {len(t)} tokens is shorter than one window of {context}")
    x = t[: n * context].reshape(n, context)
    y = t[1 : n * context + 1].reshape(n, context)
    return x, y


# ---------------------------------------------------------------------------
# shifted classification
# ---------------------------------------------------------------------------


@dataclass
class ShiftSpec:
    K: int = 2
    d: int = 2
    radius: float = 3.0
    noise: float = 1.0
    margin: float = 0.25
    rotation_deg: float = 90.0
    n_source: int = 1000
    n_target: int = 1000
    n_test: int = 1000
    seed: int = 0


@dataclass
class ShiftedClassificationTask:
    means: np.ndarray
    rotation: np.ndarray
    source: Tuple[np.ndarray, np.ndarray]
    target: Tuple[np.ndarray, np.ndarray]
    source_test: Tuple[np.ndarray, np.ndarray]
    target_test: Tuple[np.ndarray, np.ndarray]
    priors: np.ndarray


def class_means(K: int, d: int, radius: float) -> np.ndarray:
    """``K`` means evenly spaced on a circle in the first coordinate plane."""
    ang = 2 * np.pi * np.arange(K) / K
    mu = np.zeros((K, d))
    mu[:, 0] = radius * np.cos(ang)
    mu[:, 1] = radius * np.sin(ang)
    return mu


def plane_rotation(d: int, degrees: float) -> np.ndarray:
    """Rotation by ``degrees`` in every consecutive coordinate plane."""
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    R = np.eye(d)
    for i in range(0, d - 1, 2):
        R[i, i], R[i, i + 1] = c, -s
        R[i + 1, i], R[i + 1, i + 1] = s, c
    return R


def margin_to_bisectors(x: np.ndarray, y: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Signed distance of each point to the nearest bisector between its own
    class mean and any other (positive = correct side)."""
    own = means[y]
    out = np.full(len(x), np.inf)
    for j in range(len(means)):
        other = means[j]
        diff = own - other
        dist = np.linalg.norm(diff, axis=1)
        mid = 0.5 * (own + other)
        with np.errstate(invalid="ignore", divide="ignore"):
            sd = ((x - mid) * diff).sum(axis=1) / dist
        sd = np.where(y == j, np.inf, sd)
        out = np.minimum(out, sd)
    return out


def _sample(n: int, means: np.ndarray, noise: float, margin: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    K, d = means.shape
    xs, ys, have = [], [], 0
    for _ in range(1000):
        y = rng.integers(K, size=2 * n)
        x = means[y] + noise * rng.standard_normal((2 * n, d))
        ok = margin_to_bisectors(x, y, means) >= margin
        xs.append(x[ok])
        ys.append(y[ok])
        have += int(ok.sum())
        if have >= n:
            break
    else:
        raise SpecError("could not draw enough points outside the margin; increase radius")
    return np.concatenate(xs)[:n], np.concatenate(ys)[:n]


def gen_shift_task(spec: ShiftSpec) -> ShiftedClassificationTask:
    if spec.K < 2 or spec.d < 2:
        raise SpecError("need K >= 2 classes and d >= 2 features")
    if spec.margin <= 0:
        raise SpecError("margin must be positive")
    if spec.noise <= 0 or spec.radius <= 0:
        raise SpecError("noise and radius must be positive")
    means = class_means(spec.K, spec.d, spec.radius)
    R = plane_rotation(spec.d, spec.rotation_deg)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]
    src = _sample(spec.n_source, means, spec.noise, spec.margin, streams[0])
    src_test = _sample(spec.n_test, means, spec.noise, spec.margin, streams[1])
    tgt = _sample(spec.n_target, means, spec.noise, spec.margin, streams[2])
    tgt_test = _sample(spec.n_test, means, spec.noise, spec.margin, streams[3])
    rot = lambda xy: (xy[0] @ R.T, xy[1])  # noqa: E731
    return ShiftedClassificationTask(
        means=means,
        rotation=R,
        source=src,
        target=rot(tgt),
        source_test=src_test,
        target_test=rot(tgt_test),
        priors=np.full(spec.K, 1.0 / spec.K),
    )


# ---------------------------------------------------------------------------
# batching and dump/load
# ---------------------------------------------------------------------------


def batch_iterator(dataset: Tuple[np.ndarray, np.ndarray], batch: int, seed: int, epochs: Optional[int] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; epoch ``e`` uses the permutation drawn from
    ``(seed, e)``. The last batch of an epoch may be short."""
    x, y = dataset
    n = len(x)
    if batch < 1 or batch > n:
        raise SpecError(f"batch size {batch} not in [1, {n}]")
    e = 0
    while epochs is None or e < epochs:
        order = np.random.default_rng([seed, e]).permutation(n)
        for i in range(0, n, batch):
            idx = order[i : i + batch]
            yield x[idx], y[idx]
        e += 1


def dump_dataset(path, arrays) -> None:
    write_container(path, arrays, magic=DATA_MAGIC)


def load_dataset(path):
    return read_container(path, magic=DATA_MAGIC)
