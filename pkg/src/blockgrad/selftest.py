"""Oracle-equivalence checks runnable from the command line.

Each check pairs the library code with an independent, deliberately naive
reimplementation and returns ``(name, ok, detail)``.
"""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from . import tensor as T
from .adam import AdamState
from .data import batch_iterator
from .models import LayerRegistry, ModelConfig, build_mlp
from .selector import SelectionState, SelectorConfig, select_param
from .tensor import Tensor
from .trainer import TrainConfig, memory_account, train

Check = Tuple[str, bool, str]


def _blobs(seed, n=256, d=4, K=3):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(K, d)) * 4
    y = rng.integers(K, size=n)
    return means[y] + rng.normal(size=(n, d)) * 0.5, y


def check_adam_equivalence(steps: int = 100) -> Check:
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    with T.precision("float64"):
        model = build_mlp(ModelConfig(widths=[4, 12, 3], seed=11))
        ref = build_mlp(ModelConfig(widths=[4, 12, 3], seed=11))
    batches = list(batch_iterator(_blobs(5), 16, seed=2, epochs=7))[:steps]
    w = ref.registry.snapshot()
    m = {k: np.zeros_like(a) for k, a in w.items()}
    v = {k: np.zeros_like(a) for k, a in w.items()}
    worst = [0.0]

    def follow(t, _):
        ref.registry.load(w)
        T.backward(ref.loss(batches[t]))
        for k in w:
            g = ref.registry[k].grad
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            w[k] = w[k] - lr * (m[k] / (1 - b1 ** (t + 1))) / (np.sqrt(v[k] / (1 - b2 ** (t + 1))) + eps)
        ref.registry.zero_grad()
        worst[0] = max(worst[0], max(float(np.abs(model.registry[k].data - w[k]).max()) for k in w))

    cfg = TrainConfig(lr=lr, steps=steps, batch=16, selector=SelectorConfig(s=0.0, policy="full"))
    train(model, iter(batches), cfg, on_step=follow)
    return "adam equivalence (full policy, f64, 100 steps)", worst[0] < 1e-6, f"max |dw| = {worst[0]:.2e}"


def check_selection_oracle(cases: int = 1000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        L = int(rng.integers(1, 21))
        counts = [int(c) for c in rng.integers(1, 40, size=L)]
        norms = rng.random(L) * 10 + 1e-3
        s = float(rng.uniform(0.0, 0.99))
        reg = LayerRegistry([(f"L{i}", Tensor(np.zeros(c))) for i, c in enumerate(counts)])
        cfg = SelectorConfig(s=s, policy="norm-only")
        st = SelectionState.fresh(reg, cfg)
        for i, v in enumerate(norms):
            st.observe_norm(f"L{i}", v, 0)
        mags = {f"L{i}": rng.normal(size=c) for i, c in enumerate(counts)}
        sel = select_param(st, reg, cfg, magnitudes=mags)
        n = sum(counts)
        n_s = math.ceil(round((1 - s) * n, 9))
        order = sorted(range(L), key=lambda i: (-norms[i], i))
        best = None
        for j in range(1, L + 1):
            if sum(counts[i] for i in order[:j]) >= n_s:
                best = [f"L{i}" for i in order[:j]]
                break
        if sel.S != best or sel.mask_ones != n_s:
            bad += 1
    return "selection oracle (minimal prefix, exact-trim count)", bad == 0, f"{cases - bad}/{cases} registries agree"


def check_trigger(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    m = 5
    losses = list(2.0 + np.cumsum(rng.normal(scale=0.05, size=200)))

    class Scripted:
        def __init__(self):
            self.registry = LayerRegistry([("a", Tensor(np.ones(2))), ("b", Tensor(np.ones(2)))])
            self.t = 0

        def loss(self, _):
            z = T.tsum(T.mul(self.registry["a"], Tensor(np.zeros(2))))
            z = z + T.tsum(T.mul(self.registry["b"], Tensor(np.zeros(2))))
            out = z + Tensor(losses[self.t])
            self.t += 1
            return out

    met = train(Scripted(), iter(lambda: None, 1), TrainConfig(steps=200, selector=SelectorConfig(s=0.5, m=m)))
    got = [r.reselected for r in met.train_records()]
    want, hist = [], []
    for t, phi in enumerate(losses):
        fire = t == 0 or (len(hist) >= m and phi >= sum(hist[-m:]) / m)
        hist.append(phi)
        if fire:
            hist = []
        want.append(fire)
    return "patience trigger (scripted losses)", got == want, f"{sum(got)} reselections, {sum(a != b for a, b in zip(got, want))} mismatches"


def check_conservation() -> Check:
    model = build_mlp(ModelConfig(widths=[4, 24, 24, 3], seed=1))
    init = model.registry.snapshot()
    cfg = TrainConfig(lr=1e-2, steps=150, batch=16, selector=SelectorConfig(s=0.9, m=5, p=1))
    met = train(model, batch_iterator(_blobs(1), 16, 0), cfg)
    moved = 0
    for k in init:
        frozen = ~met.touched[k]
        moved += int((model.registry[k].data[frozen].view(np.uint32) != init[k][frozen].view(np.uint32)).sum())
    return "frozen-parameter conservation", moved == 0, f"{moved} frozen entries changed, q={met.q:.3f}"


def check_memory_counting() -> Check:
    reg = LayerRegistry([(f"L{i}", Tensor(np.zeros(c))) for i, c in enumerate([64, 48, 200, 8, 120, 60])])
    rng = np.random.default_rng(3)
    out = []
    ok = True
    for s in (0.5, 0.7, 0.9, 0.95):
        cfg = SelectorConfig(s=s, policy="norm-only")
        st = SelectionState.fresh(reg, cfg)
        for k in reg.names():
            st.observe_norm(k, float(rng.random()), 0)
        sel = select_param(st, reg, cfg, magnitudes={k: rng.normal(size=reg[k].shape) for k in reg.names()})
        adam = AdamState()
        adam.reset(sel.S, reg)
        rec = memory_account(adam, sel.S, reg, masks=sel.masks)
        n_s = math.ceil(round((1 - s) * reg.n, 9))
        ok &= rec.state_scalars == 2 * sum(reg.count(k) for k in sel.S)
        ok &= rec.masked_state_scalars == 2 * n_s
        out.append(f"s={s}:{rec.masked_state_scalars}")
    return "memory counting (per-entry state = 2*n_s)", ok, " ".join(out)


def run_all() -> List[Check]:
    return [
        check_adam_equivalence(),
        check_selection_oracle(),
        check_trigger(),
        check_conservation(),
        check_memory_counting(),
    ]
