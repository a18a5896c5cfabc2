"""Block selection: which layers train, which of their entries are unmasked,
and when to choose again.

Layer scores come from a norm table holding the most recent gradient norm
seen for every layer (processed norms for layers that were just stepped by
Adam, raw norms for probe layers). Layers are ranked by score and the
shortest prefix whose parameter count reaches ``n_s`` is selected; a binary
mask then trims the overshoot.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, StateError


class PolicyKind(str, enum.Enum):
    BLOCKLLM = "blockllm"
    NORM_ONLY = "norm-only"
    SUBOPT = "subopt"
    MAGNITUDE = "magnitude"
    RANDOM_BLOCK = "random-block"
    CYCLIC_BLOCK = "cyclic-block"
    FULL = "full"

    def __str__(self):
        return self.value


TRIM_MODES = ("exact-trim", "paper-percentile")
TRIGGERS = ("patience", "periodic")


@dataclass
class SelectorConfig:
    s: float = 0.5
    m: int = 50
    p: int = 0
    trim: str = "exact-trim"
    freq_smoothing: float = 0.01
    policy: PolicyKind = PolicyKind.BLOCKLLM
    trigger: str = "patience"
    seed: int = 0

    def __post_init__(self):
        self.policy = PolicyKind(self.policy)
        if not 0.0 <= self.s < 1.0:
            raise ConfigError(f"sparsity s must lie in [0, 1), got {self.s}")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"patience m must be a positive integer, got {self.m}")
        if int(self.p) != self.p or self.p < 0:
            raise ConfigError(f"probe count p must be a non-negative integer, got {self.p}")
        if self.trim not in TRIM_MODES:
            raise ConfigError(f"trim must be one of {TRIM_MODES}, got {self.trim!r}")
        if self.trigger not in TRIGGERS:
            raise ConfigError(f"trigger must be one of {TRIGGERS}, got {self.trigger!r}")
        if self.freq_smoothing <= 0:
            raise ConfigError("freq_smoothing must be positive")
        self.m, self.p = int(self.m), int(self.p)


def n_selected(s: float, n: int) -> int:
    """``ceil((1 - s) n)``, robust to the float noise in ``1 - s``."""
    k = math.ceil(round((1.0 - s) * n, 9))
    if k < 1:
        raise ConfigError(f"sparsity {s} leaves no trainable parameters out of {n}")
    return min(k, n)


# ---------------------------------------------------------------------------
# loss history and the reselection trigger
# ---------------------------------------------------------------------------


class LossHistory:
    """Bounded ring of recent losses (capacity >= patience)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("loss history capacity must be >= 1")
        self._buf = deque(maxlen=capacity)

    def record(self, loss: float) -> "LossHistory":
        self._buf.append(float(loss))
        return self

    def clear(self) -> None:
        self._buf.clear()

    def last(self, m: int) -> List[float]:
        return list(self._buf)[-m:]

    def mean_last(self, m: int) -> float:
        window = self.last(m)
        return sum(window) / len(window)

    def __len__(self):
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)

    @property
    def capacity(self) -> int:
        return self._buf.maxlen


def record_loss(history: LossHistory, loss: float) -> LossHistory:
    return history.record(loss)


def should_reselect(history: Union[LossHistory, Sequence[float]], loss: float, m: int, step: int) -> bool:
    """True at step 0, or once ``m`` losses are on record and ``loss`` fails
    to beat their mean."""
    if step == 0:
        return True
    h = list(history)
    if len(h) < m:
        return False
    return loss >= sum(h[-m:]) / m


# ---------------------------------------------------------------------------
# scoring and selection
# ---------------------------------------------------------------------------


def update_visit_frequency(visit_counts: Mapping[str, int], T: int) -> Dict[str, float]:
    """``f_l`` = fraction of selection events that included ``l``."""
    denom = max(T, 1)
    return {k: c / denom for k, c in visit_counts.items()}


def layer_scores(policy: PolicyKind, norms: Mapping[str, float], freq: Mapping[str, float], smoothing: float) -> Dict[str, float]:
    if policy is PolicyKind.NORM_ONLY:
        return dict(norms)
    return {k: v / (freq.get(k, 0.0) + smoothing) for k, v in norms.items()}


def minimal_prefix(order: Sequence[str], counts: Mapping[str, int], n_s: int) -> Tuple[List[str], int]:
    """Shortest prefix of ``order`` whose counts sum to at least ``n_s``."""
    chosen, total = [], 0
    for name in order:
        chosen.append(name)
        total += counts[name]
        if total >= n_s:
            break
    return chosen, total


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    q = min(max(q, 0.0), 1.0)
    r = max(math.ceil(round(q * v.size, 9)), 1)
    return float(v[r - 1])


def compute_threshold(magnitudes: Mapping[str, np.ndarray], zeta: float, mode: str, n_s: Optional[int] = None) -> Dict[str, float]:
    """Per-layer cut-off ``tau``; entries with ``|value| >= tau`` are kept.

    ``paper-percentile`` takes the nearest-rank ``(1 - zeta)`` quantile of
    each layer's magnitudes. ``exact-trim`` returns the value of the
    ``n_s``-th largest magnitude across all layers (the same for every layer);
    ties at that value are resolved by ``build_masks``.
    """
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    mags = {k: np.abs(np.asarray(v)) for k, v in magnitudes.items()}
    if mode == "paper-percentile":
        if zeta == 0:
            return {k: float(a.min()) for k, a in mags.items()}
        return {k: nearest_rank_quantile(a, 1.0 - zeta) for k, a in mags.items()}
    if mode == "exact-trim":
        flat = np.concatenate([a.reshape(-1) for a in mags.values()])
        k = flat.size if n_s is None else min(n_s, flat.size)
        tau = float(np.sort(flat)[::-1][k - 1])
        return {name: tau for name in mags}
    raise ConfigError(f"unknown trim mode {mode!r}")


def top_k_masks(magnitudes: Mapping[str, np.ndarray], k: int) -> Dict[str, np.ndarray]:
    """Keep the ``k`` largest ``|value|`` entries across layers. Ties go to
    the earlier layer, then the lower flat index."""
    names = list(magnitudes)
    flats = [np.abs(np.asarray(magnitudes[n], dtype=np.float64)).reshape(-1) for n in names]
    flat = np.concatenate(flats)
    keep = np.zeros(flat.size, dtype=bool)
    keep[np.argsort(-flat, kind="stable")[:k]] = True
    out, pos = {}, 0
    for n, f in zip(names, flats):
        out[n] = keep[pos : pos + f.size].reshape(np.shape(magnitudes[n])).copy()
        pos += f.size
    return out


def build_masks(magnitudes: Mapping[str, np.ndarray], n_s: int, sigma_p: int, mode: str) -> Dict[str, np.ndarray]:
    zeta = (sigma_p - n_s) / n_s
    if mode == "exact-trim":
        return top_k_masks(magnitudes, n_s)
    tau = compute_threshold(magnitudes, zeta, mode)
    return {k: np.abs(np.asarray(v)) >= tau[k] for k, v in magnitudes.items()}


def sample_probe_layers(names: Sequence[str], selected, p: int, rng: np.random.Generator) -> List[str]:
    """``p`` layers drawn uniformly without replacement from outside
    ``selected``, returned in registry order."""
    sel = set(selected)
    rest = [k for k in names if k not in sel]
    if p <= 0:
        return []
    if p >= len(rest):
        return rest
    picked = rng.choice(len(rest), size=p, replace=False)
    return [rest[i] for i in sorted(picked)]


@dataclass
class Selection:
    """One reselection event."""

    step: int
    policy: PolicyKind
    S: List[str]
    scores: Dict[str, float]
    n_s: int
    sigma_p: int
    masks: Dict[str, np.ndarray]

    @property
    def zeta(self) -> float:
        return (self.sigma_p - self.n_s) / self.n_s

    @property
    def mask_ones(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def trace_line(self) -> str:
        ranked = ",".join(f"{k}:{self.scores.get(k, float('nan')):.6g}" for k in self.S)
        return f"{self.step}\t{self.policy.value}\t{self.n_s}\t{self.sigma_p}\t{self.zeta:.6f}\t{ranked}"


TRACE_HEADER = "step\tpolicy\tn_s\tsigma_p\tzeta\tselected"


@dataclass
class SelectionState:
    S: List[str] = field(default_factory=list)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    visit_counts: Dict[str, int] = field(default_factory=dict)
    T: int = 0
    norm_table: Dict[str, Tuple[float, int]] = field(default_factory=dict)
    history: LossHistory = field(default_factory=lambda: LossHistory(1))
    policy: PolicyKind = PolicyKind.BLOCKLLM
    cursor: int = 0

    @classmethod
    def fresh(cls, registry, cfg: SelectorConfig) -> "SelectionState":
        return cls(
            visit_counts={k: 0 for k in registry.names()},
            history=LossHistory(cfg.m),
            policy=cfg.policy,
        )

    def observe_norm(self, name: str, norm: float, step: int) -> None:
        self.norm_table[name] = (float(norm), int(step))

    def frequencies(self) -> Dict[str, float]:
        return update_visit_frequency(self.visit_counts, self.T)


Magnitudes = Union[Mapping[str, np.ndarray], Callable[[List[str]], Mapping[str, np.ndarray]]]


def _order(state: SelectionState, registry, cfg: SelectorConfig, n_s: int, rng) -> Tuple[List[str], Dict[str, float]]:
    names = registry.names()
    counts = registry.counts()
    policy = cfg.policy
    if policy is PolicyKind.FULL:
        return names, {k: state.norm_table.get(k, (float("nan"), 0))[0] for k in names}
    if policy is PolicyKind.RANDOM_BLOCK:
        if rng is None:
            raise ConfigError("random-block policy needs an rng")
        perm = [names[i] for i in rng.permutation(len(names))]
        return perm, {k: float(i) for i, k in enumerate(perm)}
    if policy is PolicyKind.CYCLIC_BLOCK:
        c = state.cursor % len(names)
        rot = names[c:] + names[:c]
        chosen, _ = minimal_prefix(rot, counts, n_s)
        state.cursor = (c + len(chosen)) % len(names)
        return rot, {k: float(i) for i, k in enumerate(rot)}
    missing = [k for k in names if k not in state.norm_table]
    if missing:
        raise StateError(f"norm table has no entry for {missing}")
    norms = {k: state.norm_table[k][0] for k in names}
    scores = layer_scores(policy, norms, state.frequencies(), cfg.freq_smoothing)
    if policy is PolicyKind.SUBOPT:
        order = sorted(names, key=lambda k: scores[k])
    else:
        order = sorted(names, key=lambda k: -scores[k])
    return order, scores


def select_param(
    state: SelectionState,
    registry,
    cfg: SelectorConfig,
    magnitudes: Optional[Magnitudes] = None,
    rng: Optional[np.random.Generator] = None,
    step: int = 0,
) -> Selection:
    """Choose a new selected set and its masks, updating ``state`` in place.

    ``magnitudes`` gives per-entry values used for mask trimming, either as
    a dict or as a callable invoked with the chosen layer names (so the
    caller can materialize gradients only for those layers).
    """
    if len(registry) == 0:
        raise ConfigError("cannot select from an empty registry")
    counts = registry.counts()
    n = sum(counts.values())
    policy = cfg.policy

    if policy is PolicyKind.MAGNITUDE:
        n_s = n_selected(cfg.s, n)
        w = {k: registry[k].data for k in registry.names()}
        masks_all = top_k_masks(w, n_s)
        S = [k for k in registry.names() if masks_all[k].any()]
        masks = {k: masks_all[k] for k in S}
        scores = {k: float(masks[k].sum()) for k in S}
        sigma_p = sum(counts[k] for k in S)
    elif policy is PolicyKind.FULL:
        n_s = n
        S, scores = _order(state, registry, cfg, n_s, rng)
        sigma_p = n
        masks = {k: np.ones(registry[k].shape, dtype=bool) for k in S}
    else:
        n_s = n_selected(cfg.s, n)
        order, scores = _order(state, registry, cfg, n_s, rng)
        S, sigma_p = minimal_prefix(order, counts, n_s)
        if sigma_p == n_s:
            masks = {k: np.ones(registry[k].shape, dtype=bool) for k in S}
        else:
            if magnitudes is None:
                raise StateError("mask trimming needs per-entry magnitudes for the selected layers")
            mags = magnitudes(list(S)) if callable(magnitudes) else magnitudes
            missing = [k for k in S if k not in mags]
            if missing:
                raise StateError(f"no magnitudes supplied for {missing}")
            masks = build_masks({k: mags[k] for k in S}, n_s, sigma_p, cfg.trim)

    for k in S:
        state.visit_counts[k] = state.visit_counts.get(k, 0) + 1
    state.T += 1
    state.S = list(S)
    state.masks = masks
    return Selection(step=step, policy=policy, S=list(S), scores=scores, n_s=n_s, sigma_p=sigma_p, masks=masks)
