"""The block-selective training loop and its instrumentation."""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, TextIO

import numpy as np

from . import tensor as T
from .adam import AdamState, masked_update
from .errors import ConfigError, StateError, TrainingAborted
from .selector import (
    TRACE_HEADER,
    PolicyKind,
    Selection,
    SelectionState,
    SelectorConfig,
    n_selected,
    sample_probe_layers,
    select_param,
    should_reselect,
)

CSV_HEADER = "step,phase,loss,selected_params,state_scalars,grad_scalars,q,reselected"
NORM_SOURCES = ("mixed", "raw")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    steps: int = 100
    batch: int = 32
    seed: int = 0
    eval_every: int = 0
    lr_schedule: str = "constant"
    lr_min_frac: float = 0.1
    # "mixed": processed norms for selected layers, raw norms for probes
    norm_source: str = "mixed"
    snapshot: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        for key in ("lr", "eps"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.norm_source not in NORM_SOURCES:
            raise ConfigError(f"norm_source must be one of {NORM_SOURCES}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def lr_at(self, t: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        lo = self.lr * self.lr_min_frac
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * t / self.steps))


@dataclass
class StepRecord:
    step: int
    phase: str
    loss: float
    selected_params: int
    state_scalars: int
    grad_scalars: int
    q: float
    reselected: bool

    def csv(self) -> str:
        return (
            f"{self.step},{self.phase},{self.loss!r},{self.selected_params},{self.state_scalars},"
            f"{self.grad_scalars},{self.q!r},{int(self.reselected)}"
        )


@dataclass
class MemoryRecord:
    param_scalars: int
    grad_scalars: int
    state_scalars: int
    full_state_scalars: int
    reduction_ratio: float
    masked_state_scalars: Optional[int] = None
    masked_reduction_ratio: Optional[float] = None


@dataclass
class RunMetrics:
    n: int
    records: List[StepRecord] = field(default_factory=list)
    touched: Dict[str, np.ndarray] = field(default_factory=dict)
    selections: List[Selection] = field(default_factory=list)
    initial: Optional[Dict[str, np.ndarray]] = None
    wallclock_seconds: float = 0.0

    @property
    def q(self) -> float:
        return unique_param_fraction(self)

    def train_records(self) -> List[StepRecord]:
        return [r for r in self.records if r.phase == "train"]

    def eval_records(self) -> List[StepRecord]:
        return [r for r in self.records if r.phase == "eval"]

    def final_train_loss(self, window_frac: float = 0.05) -> float:
        """Mean train loss over the last ``window_frac`` of steps."""
        losses = [r.loss for r in self.train_records()]
        w = max(1, int(len(losses) * window_frac))
        return float(np.mean(losses[-w:]))

    def final_eval_loss(self) -> float:
        ev = self.eval_records()
        return ev[-1].loss if ev else float("nan")

    def peak_state_scalars(self) -> int:
        return max((r.state_scalars for r in self.records), default=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.records:
            buf.write(r.csv() + "\n")
        return buf.getvalue()

    def summary(self) -> Dict[str, object]:
        return {
            "final_train_loss": self.final_train_loss(),
            "final_eval_loss": self.final_eval_loss(),
            "peak_state_scalars": self.peak_state_scalars(),
            "q_final": self.q,
            "wallclock_seconds": round(self.wallclock_seconds, 3),
        }


def unique_param_fraction(metrics: RunMetrics) -> float:
    if not metrics.touched:
        return 0.0
    return sum(int(t.sum()) for t in metrics.touched.values()) / metrics.n


def memory_account(state: AdamState, S: Iterable[str], registry, probes: Iterable[str] = (), masks=None) -> MemoryRecord:
    """Scalar counts standing in for device memory.

    ``masks`` (optional) adds the per-masked-entry lower bound: the state
    that would be needed if moments were kept only for unmasked entries.
    """
    S = list(S)
    counts = registry.counts()
    n = registry.n
    used = set(S) | set(probes)
    state_scalars = state.state_scalars()
    full = 2 * n
    rec = MemoryRecord(
        param_scalars=n,
        grad_scalars=sum(counts[k] for k in used),
        state_scalars=state_scalars,
        full_state_scalars=full,
        reduction_ratio=1.0 - state_scalars / full,
    )
    if masks is not None:
        ones = sum(int(np.asarray(masks[k]).sum()) for k in S)
        rec.masked_state_scalars = 2 * ones
        rec.masked_reduction_ratio = 1.0 - 2 * ones / full
    return rec


def gradient_pass(model, batch, S: Sequence[str], probes: Sequence[str] = ()):
    """Forward + backward materializing gradients only for ``S`` and ``probes``."""
    loss = model.loss(batch)
    return float(loss.data), _backward_for(model.registry, loss, list(S) + [k for k in probes if k not in S])


def _backward_for(registry, loss, names: List[str]) -> Dict[str, np.ndarray]:
    params = [registry[k] for k in names]
    T.backward(loss, wrt=params)
    out = {}
    for k, p in zip(names, params):
        out[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


def weight_delta_histogram(initial: Dict[str, np.ndarray], final: Dict[str, np.ndarray], thresh: float, bins=20) -> Dict[str, object]:
    """Histograms of ``delta = |w0 - wt|`` and of ``|wt|`` where ``delta > thresh``."""
    if set(initial) != set(final):
        raise StateError("snapshot and final weights name different layers")
    for k in initial:
        if np.shape(initial[k]) != np.shape(final[k]):
            raise StateError(f"snapshot shape mismatch for {k!r}")
    w0 = np.concatenate([np.asarray(initial[k], dtype=np.float64).reshape(-1) for k in initial])
    wt = np.concatenate([np.asarray(final[k], dtype=np.float64).reshape(-1) for k in initial])
    delta = np.abs(w0 - wt)
    changed = np.abs(wt[delta > thresh])
    d_counts, d_edges = np.histogram(delta, bins=bins)
    if changed.size:
        c_counts, c_edges = np.histogram(changed, bins=bins)
    else:
        c_counts, c_edges = np.zeros(bins, dtype=np.int64), np.linspace(0.0, 1.0, bins + 1)
    return {
        "delta": delta,
        "delta_counts": d_counts,
        "delta_edges": d_edges,
        "changed_counts": c_counts,
        "changed_edges": c_edges,
        "n_changed": int(changed.size),
    }


def _reselect_due(cfg: SelectorConfig, state: SelectionState, loss: float, t: int) -> bool:
    if cfg.policy is PolicyKind.FULL:
        return t == 0
    if cfg.trigger == "periodic":
        return t % cfg.m == 0
    return should_reselect(state.history, loss, cfg.m, t)


def train(
    model,
    batches: Iterator,
    cfg: TrainConfig,
    eval_fn: Optional[Callable[[object], float]] = None,
    trace: Optional[TextIO] = None,
    on_step: Optional[Callable[[int, RunMetrics], None]] = None,
) -> RunMetrics:
    """Run ``cfg.steps`` iterations of block-selective Adam on ``model``.

    Each step runs one forward pass; the reselection decision only needs the
    loss, so the backward pass is then restricted to the (possibly new)
    selected layers plus the probe layers. At step 0 every layer is
    differentiated to seed the norm table.
    """
    reg = model.registry
    names = reg.names()
    counts = reg.counts()
    scfg = cfg.selector
    n_selected(scfg.s, reg.n)  # validates s against n

    seeds = np.random.SeedSequence([cfg.seed, 0xB10C]).spawn(2)
    probe_rng = np.random.default_rng(seeds[0])
    policy_rng = np.random.default_rng(seeds[1])

    state = SelectionState.fresh(reg, scfg)
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.bias_correction)
    metrics = RunMetrics(n=reg.n, touched={k: np.zeros(reg[k].shape, dtype=bool) for k in names})
    if cfg.snapshot:
        metrics.initial = reg.snapshot()
    if trace is not None:
        trace.write(TRACE_HEADER + "\n")
    start = time.perf_counter()

    for t in range(cfg.steps):
        batch = next(batches)
        loss = model.loss(batch)
        phi = float(loss.data)
        if not math.isfinite(phi):
            raise TrainingAborted(
                f"non-finite loss {phi} at step {t}",
                {"step": t, "norms": {k: v[0] for k, v in state.norm_table.items()}},
            )
        reselect = _reselect_due(scfg, state, phi, t)
        state.history.record(phi)
        if reselect:
            state.history.clear()

        grads: Dict[str, np.ndarray] = {}
        probes: List[str] = []

        def materialize(selected: List[str]) -> Dict[str, np.ndarray]:
            nonlocal probes
            if not grads:
                probes = sample_probe_layers(names, selected, scfg.p, probe_rng)
                grads.update(_backward_for(reg, loss, list(selected) + probes))
                for k in probes:
                    state.observe_norm(k, float(np.linalg.norm(grads[k])), t)
            return grads

        if reselect:
            if t == 0:
                for k, g in materialize(names).items():
                    state.observe_norm(k, float(np.linalg.norm(g)), t)
            sel = select_param(state, reg, scfg, magnitudes=materialize, rng=policy_rng, step=t)
            materialize(state.S)
            adam.reset(state.S, reg)
            metrics.selections.append(Selection(sel.step, sel.policy, sel.S, sel.scores, sel.n_s, sel.sigma_p, {}))
            if trace is not None:
                trace.write(sel.trace_line() + "\n")
        else:
            materialize(state.S)

        lr = cfg.lr_at(t)
        for k in state.S:
            g_proc = adam.step(k, grads[k])
            if cfg.norm_source == "mixed":
                state.observe_norm(k, float(np.linalg.norm(g_proc)), t)
            else:
                state.observe_norm(k, float(np.linalg.norm(grads[k])), t)
            mask = state.masks[k]
            masked_update(reg[k].data, g_proc.astype(reg[k].data.dtype, copy=False), mask, lr)
            metrics.touched[k] |= mask

        metrics.records.append(
            StepRecord(
                step=t,
                phase="train",
                loss=phi,
                selected_params=int(sum(int(state.masks[k].sum()) for k in state.S)),
                state_scalars=adam.state_scalars(),
                grad_scalars=sum(counts[k] for k in grads),
                q=unique_param_fraction(metrics),
                reselected=reselect,
            )
        )
        if eval_fn is not None and ((cfg.eval_every and (t + 1) % cfg.eval_every == 0) or t == cfg.steps - 1):
            last = metrics.records[-1]
            metrics.records.append(
                StepRecord(t, "eval", float(eval_fn(model)), last.selected_params, last.state_scalars, 0, last.q, False)
            )
        if on_step is not None:
            on_step(t, metrics)

    metrics.wallclock_seconds = time.perf_counter() - start
    return metrics
