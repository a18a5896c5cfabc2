"""Experiment plumbing: flat key=value configs, seeded runs, sweeps and reports.

A run directory holds ``config.txt`` (the resolved config), ``metrics.csv``,
``summary.txt`` (flat key=value) and ``selection_trace.tsv``. Everything in
it is a pure function of the config and the seed.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import CharSpec, ShiftSpec, batch_iterator, gen_char_corpus, gen_shift_task, lm_windows
from .errors import ConfigError, TrainingAborted
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .selector import PolicyKind, SelectorConfig
from .trainer import TrainConfig, train

TASKS = ("markov-lm", "separable", "shift-finetune")


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> List[int]:
    return [int(x) for x in v.replace(";", ",").split(",") if x.strip()]


# key -> (parser, default). A default of None means "taken from the task".
KEYS: Dict[str, Tuple[Callable[[str], object], object]] = {
    "task": (str, None),
    "seeds": (_ints, "0,1,2,3,4"),
    "out": (str, "runs"),
    "precision": (str, "float32"),
    # model
    "widths": (_ints, None),
    "activation": (str, "relu"),
    "vocab": (int, 16),
    "d_model": (int, 32),
    "n_blocks": (int, 2),
    "n_heads": (int, 2),
    "d_ff": (int, 64),
    "context": (int, 16),
    "tied_head": (_bool, "false"),
    # data
    "corpus_length": (int, 60000),
    "alpha": (float, 0.2),
    "eval_windows": (int, 64),
    "classes": (int, None),
    "features": (int, None),
    "radius": (float, None),
    "noise": (float, None),
    "margin": (float, 0.25),
    "rotation_deg": (float, None),
    "n_source": (int, 1000),
    "n_target": (int, None),
    "n_test": (int, 1000),
    "pretrain_steps": (int, 400),
    "pretrain_lr": (float, 1e-2),
    # optimizer and loop
    "lr": (float, None),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "bias_correction": (_bool, "true"),
    "steps": (int, None),
    "batch": (int, None),
    "eval_every": (int, 0),
    "lr_schedule": (str, None),
    "lr_min_frac": (float, 0.1),
    "norm_source": (str, "raw"),
    # selector
    "policy": (str, "blockllm"),
    "s": (float, 0.5),
    "m": (int, 50),
    "p": (int, 2),
    "trim": (str, "exact-trim"),
    "trigger": (str, "patience"),
    "freq_smoothing": (float, 0.01),
}

TASK_DEFAULTS: Dict[str, Dict[str, str]] = {
    "markov-lm": dict(steps="2000", batch="16", lr="0.01", lr_schedule="cosine"),
    "separable": dict(
        widths="4,32,3", classes="3", features="4", radius="3", noise="1", rotation_deg="0",
        n_target="1000", steps="300", batch="32", lr="0.01", lr_schedule="constant", m="20",
    ),
    "shift-finetune": dict(
        widths="8,64,64,4", classes="4", features="8", radius="2.5", noise="1", rotation_deg="30",
        n_target="300", steps="150", batch="32", lr="0.003", lr_schedule="constant", trigger="periodic",
    ),
}

ExperimentConfig = Dict[str, object]


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Returns raw strings."""
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line.strip()!r}")
        key, value = (x.strip() for x in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key in {line.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (x.strip() for x in item.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r} in --set")
        out[k] = v
    return out


def resolve(raw: Dict[str, str]) -> ExperimentConfig:
    """Fill defaults, type every value and validate enumerations."""
    if "task" not in raw:
        raise ConfigError("missing required key 'task'")
    task = raw["task"]
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    merged = {k: d for k, (_, d) in KEYS.items() if d is not None}
    merged.update(TASK_DEFAULTS[task])
    merged.update(raw)
    cfg: ExperimentConfig = {}
    for k, (parse, _) in KEYS.items():
        if k not in merged:
            continue
        try:
            cfg[k] = parse(str(merged[k]))
        except ValueError as e:
            raise ConfigError(f"bad value for {k!r}: {merged[k]!r} ({e})") from None
    if cfg["precision"] not in ("float32", "float64"):
        raise ConfigError("precision must be float32 or float64")
    if not cfg["seeds"]:
        raise ConfigError("seed list is empty")
    if cfg["policy"] not in [p.value for p in PolicyKind]:
        raise ConfigError(f"unknown policy {cfg['policy']!r}; choose from {[p.value for p in PolicyKind]}")
    # build the typed sub-configs once so errors surface before any run starts
    train_config(cfg, 0)
    return cfg


def _text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_text(cfg[k])}\n" for k in KEYS if k in cfg)


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    raw = parse_config_text(Path(path).read_text(), str(path))
    raw.update(overrides or {})
    return resolve(raw)


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    sel = SelectorConfig(
        s=cfg["s"], m=cfg["m"], p=cfg["p"], trim=cfg["trim"], freq_smoothing=cfg["freq_smoothing"],
        policy=cfg["policy"], trigger=cfg["trigger"], seed=seed,
    )
    return TrainConfig(
        lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"], bias_correction=cfg["bias_correction"],
        selector=sel, steps=cfg["steps"], batch=cfg["batch"], seed=seed, eval_every=cfg["eval_every"],
        lr_schedule=cfg["lr_schedule"], lr_min_frac=cfg["lr_min_frac"], norm_source=cfg["norm_source"],
    )


def model_config(cfg: ExperimentConfig, seed: int) -> ModelConfig:
    if cfg["task"] == "markov-lm":
        return ModelConfig(
            kind="tiny-transformer", vocab=cfg["vocab"], d_model=cfg["d_model"], n_blocks=cfg["n_blocks"],
            n_heads=cfg["n_heads"], d_ff=cfg["d_ff"], context=cfg["context"], tied_head=cfg["tied_head"], seed=seed,
        )
    widths = list(cfg["widths"])
    if widths[0] != cfg["features"] or widths[-1] != cfg["classes"]:
        raise ConfigError(f"widths {widths} must start at features={cfg['features']} and end at classes={cfg['classes']}")
    return ModelConfig(kind="mlp", widths=widths, activation=cfg["activation"], seed=seed)


def shift_spec(cfg: ExperimentConfig, seed: int) -> ShiftSpec:
    return ShiftSpec(
        K=cfg["classes"], d=cfg["features"], radius=cfg["radius"], noise=cfg["noise"], margin=cfg["margin"],
        rotation_deg=cfg["rotation_deg"], n_source=cfg["n_source"], n_target=cfg["n_target"], n_test=cfg["n_test"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------


def _mean_loss(model, x, y, chunk=256) -> float:
    total, n = 0.0, 0
    for i in range(0, len(x), chunk):
        xb, yb = x[i : i + chunk], y[i : i + chunk]
        total += float(model.loss((xb, yb)).data) * len(xb)
        n += len(xb)
    return total / n


def _run_markov(cfg, seed, tcfg, trace):
    corpus = gen_char_corpus(CharSpec(vocab=cfg["vocab"], length=cfg["corpus_length"], alpha=cfg["alpha"], seed=seed))
    tr, ev = corpus.split(0.9)
    ex, ey = lm_windows(ev, cfg["context"])
    ex, ey = ex[: cfg["eval_windows"]], ey[: cfg["eval_windows"]]
    model = build_model(model_config(cfg, seed))
    met = train(
        model, batch_iterator(lm_windows(tr, cfg["context"]), cfg["batch"], seed), tcfg,
        eval_fn=lambda mdl: _mean_loss(mdl, ex, ey), trace=trace,
    )
    return model, met, {"entropy_rate": corpus.entropy_rate()}


def _run_separable(cfg, seed, tcfg, trace):
    task = gen_shift_task(shift_spec(cfg, seed))
    model = build_model(model_config(cfg, seed))
    tx, ty = task.source_test
    met = train(model, batch_iterator(task.source, cfg["batch"], seed), tcfg, eval_fn=lambda mdl: _mean_loss(mdl, tx, ty), trace=trace)
    return model, met, {"test_accuracy": model.accuracy(tx, ty)}


def _run_shift(cfg, seed, tcfg, trace, outdir: Path):
    task = gen_shift_task(shift_spec(cfg, seed))
    mcfg = model_config(cfg, seed)
    base = build_model(mcfg)
    pre = TrainConfig(
        lr=cfg["pretrain_lr"], steps=cfg["pretrain_steps"], batch=cfg["batch"], seed=seed,
        selector=SelectorConfig(s=0.0, policy="full"), snapshot=False,
    )
    train(base, batch_iterator(task.source, cfg["batch"], seed), pre)
    ckpt = outdir / "pretrained.ckpt"
    save_checkpoint(base, ckpt)
    model = build_model(mcfg)
    load_checkpoint(model, ckpt)
    tx, ty = task.target_test
    extra = {
        "source_accuracy": model.accuracy(*task.source_test),
        "target_accuracy_before": model.accuracy(tx, ty),
    }
    met = train(
        model, batch_iterator(task.target, cfg["batch"], seed + 1_000_003), tcfg,
        eval_fn=lambda mdl: _mean_loss(mdl, tx, ty), trace=trace,
    )
    extra["target_accuracy"] = model.accuracy(tx, ty)
    return model, met, extra


def _fmt_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_one(cfg: ExperimentConfig, seed: int, outdir) -> Dict[str, object]:
    """Train one seed of ``cfg`` and write its artifacts into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(format_config({**cfg, "seeds": [seed], "out": str(outdir)}))
    tcfg = train_config(cfg, seed)
    trace = io.StringIO()
    try:
        with T.precision(cfg["precision"]):
            if cfg["task"] == "markov-lm":
                model, met, extra = _run_markov(cfg, seed, tcfg, trace)
            elif cfg["task"] == "separable":
                model, met, extra = _run_separable(cfg, seed, tcfg, trace)
            else:
                model, met, extra = _run_shift(cfg, seed, tcfg, trace, outdir)
    except TrainingAborted as e:
        diag = e.diagnostics
        lines = [f"step={diag.get('step')}", f"message={e}"]
        lines += [f"norm.{k}={v!r}" for k, v in diag.get("norms", {}).items()]
        (outdir / "aborted.txt").write_text("\n".join(lines) + "\n")
        raise
    counts = model.registry.counts()
    summary = dict(met.summary())
    summary.update(
        task=cfg["task"], policy=cfg["policy"], seed=seed, n_params=model.registry.n,
        max_layer_params=max(counts.values()), reselections=len(met.selections),
    )
    summary.update(extra)
    (outdir / "metrics.csv").write_text(met.to_csv())
    (outdir / "selection_trace.tsv").write_text(trace.getvalue())
    (outdir / "summary.txt").write_text("".join(f"{k}={_fmt_value(v)}\n" for k, v in summary.items() if k != "wallclock_seconds"))
    # timing is the one non-reproducible number; keep it out of the compared files
    (outdir / "timing.txt").write_text(f"wallclock_seconds={summary['wallclock_seconds']}\n")
    return summary


def _run_job(job):
    cfg, seed, outdir = job
    return run_one(cfg, seed, outdir)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("BG_THREADS", "1")))
    except ValueError:
        raise ConfigError("BG_THREADS must be an integer") from None


def run_jobs(jobs: List[Tuple[ExperimentConfig, int, Path]]) -> List[Dict[str, object]]:
    workers = min(threads(), len(jobs))
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def run(cfg: ExperimentConfig, out=None) -> List[Dict[str, object]]:
    out = Path(out or cfg["out"])
    return run_jobs([(cfg, s, out / f"seed_{s}") for s in cfg["seeds"]])


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[str], out=None) -> Dict[str, List[Dict[str, object]]]:
    """One subdirectory per value; every value shares the seed list."""
    if axis not in KEYS or axis in ("task", "seeds", "out"):
        raise ConfigError(f"cannot sweep over {axis!r}")
    values = [v for v in values if str(v).strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out or cfg["out"])
    raw = {k: _text(v) for k, v in cfg.items()}
    jobs, index = [], []
    for v in values:
        vcfg = resolve({**raw, axis: str(v)})
        for s in vcfg["seeds"]:
            jobs.append((vcfg, s, out / f"{axis}={v}" / f"seed_{s}"))
            index.append(str(v))
    results: Dict[str, List[Dict[str, object]]] = {str(v): [] for v in values}
    for v, summ in zip(index, run_jobs(jobs)):
        results[v].append(summ)
    return results


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


class ReportError(ValueError):
    pass


def read_kv(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_metrics(path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def find_runs(paths: Sequence) -> List[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if not p.is_dir():
            raise ReportError(f"not a directory: {p}")
        if (p / "summary.txt").exists():
            found.append(p)
        else:
            found += sorted(q.parent for q in p.rglob("summary.txt"))
    seen, out = set(), []
    for p in found:
        if p.resolve() not in seen:
            seen.add(p.resolve())
            out.append(p)
    return out


class RunRecord:
    def __init__(self, path: Path):
        self.path = path
        self.config = read_kv(path / "config.txt")
        self.summary = read_kv(path / "summary.txt")
        self.rows = [r for r in read_metrics(path / "metrics.csv") if r["phase"] == "train"]

    @property
    def losses(self) -> np.ndarray:
        return np.array([float(r["loss"]) for r in self.rows])

    def variant_key(self) -> Tuple[Tuple[str, str], ...]:
        return tuple(sorted((k, v) for k, v in self.config.items() if k not in ("seeds", "out")))

    def num(self, key: str) -> float:
        return float(self.summary.get(key, "nan"))


def _smoothed(losses: np.ndarray, window: int = 20) -> np.ndarray:
    c = np.cumsum(np.insert(losses, 0, 0.0))
    out = np.empty_like(losses)
    for i in range(len(losses)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def steps_to_threshold(losses: np.ndarray, threshold: float) -> float:
    hit = np.nonzero(_smoothed(losses) <= threshold)[0]
    return float(hit[0]) if hit.size else float("nan")


def early_phase_loss(losses: np.ndarray, frac: float = 0.2) -> float:
    k = max(1, int(math.ceil(len(losses) * frac)))
    return float(np.mean(losses[:k]))


class Variant:
    def __init__(self, key, runs: List[RunRecord]):
        self.key = key
        self.runs = sorted(runs, key=lambda r: int(r.config.get("seeds", "0")))
        self.config = dict(key)

    def median(self, field: str) -> float:
        vals = [r.num(field) for r in self.runs]
        return float(np.median(vals)) if vals else float("nan")

    def seeds(self) -> List[str]:
        return [r.config.get("seeds", "?") for r in self.runs]


def group_variants(runs: List[RunRecord]) -> List[Variant]:
    groups: Dict[tuple, List[RunRecord]] = {}
    for r in runs:
        groups.setdefault(r.variant_key(), []).append(r)
    return [Variant(k, v) for k, v in groups.items()]


def _label(variant: Variant, varying: List[str]) -> str:
    if not varying:
        return variant.config.get("policy", "run")
    return ",".join(f"{k}={variant.config[k]}" for k in varying)


def _float(v: str) -> float:
    try:
        return float(v)
    except ValueError:
        return float("nan")


def _sort_key(variant: Variant, varying: List[str]):
    return tuple((_float(variant.config[k]), variant.config[k]) for k in varying)


def _paired(a: Variant, b: Variant, fn) -> Optional[float]:
    sa = {r.config.get("seeds"): r for r in a.runs}
    sb = {r.config.get("seeds"): r for r in b.runs}
    common = sorted(set(sa) & set(sb))
    if not common:
        return None
    return float(np.median([fn(sb[s]) - fn(sa[s]) for s in common]))


def criteria_lines(variants: List[Variant], varying: List[str]) -> List[str]:
    """PASS/FAIL lines for the comparisons that metrics alone can decide."""
    lines: List[str] = []
    by_policy: Dict[str, List[Variant]] = {}
    for v in variants:
        by_policy.setdefault(v.config.get("policy", ""), []).append(v)
    others = [k for k in varying if k != "policy"]

    def match(a: Variant, policy: str) -> Optional[Variant]:
        for v in by_policy.get(policy, []):
            if all(v.config.get(k) == a.config.get(k) for k in others):
                return v
        return None

    task = variants[0].config.get("task")
    for b in by_policy.get("blockllm", []):
        tag = f" [{_label(b, others)}]" if others else ""
        sub = match(b, "subopt")
        if sub is not None:
            d = sub.median("final_train_loss") - b.median("final_train_loss")
            lines.append(f"{'PASS' if d >= 0.05 else 'FAIL'} subopt-minus-blockllm final loss{tag}: {d:+.4f} (need >= +0.05)")
        nrm = match(b, "norm-only")
        if nrm is not None:
            d = _paired(b, nrm, lambda r: early_phase_loss(r.losses))
            ok = d is not None and d >= 0
            lines.append(f"{'PASS' if ok else 'FAIL'} norm-only-minus-blockllm early-phase loss{tag}: {d:+.4f} (need >= 0, soft)")
        full = match(b, "full")
        if full is not None and task == "markov-lm":
            d = b.median("final_train_loss") - full.median("final_train_loss")
            slack = b.median("max_layer_params") * 2
            budget = 0.5 * full.median("peak_state_scalars") + slack
            mem = b.median("peak_state_scalars")
            ok = d <= 0.1 and mem <= budget
            lines.append(
                f"{'PASS' if ok else 'FAIL'} blockllm-vs-full final loss{tag}: {d:+.4f} (need <= +0.1), "
                f"state scalars {mem:.0f} <= {budget:.0f}"
            )
    if "s" in varying and len(varying) == 1:
        ordered = sorted(variants, key=lambda v: float(v.config["s"]))
        st = [v.median("peak_state_scalars") for v in ordered]
        ok = all(b <= a for a, b in zip(st, st[1:]))
        lines.append(f"{'PASS' if ok else 'FAIL'} state scalars non-increasing in s: {st}")
        if task == "shift-finetune":
            acc = {float(v.config["s"]): v.median("target_accuracy") for v in ordered}
            if {0.0, 0.5, 0.9} <= set(acc):
                ok = abs(acc[0.5] - acc[0.0]) <= 0.05 and acc[0.9] < acc[0.5]
                lines.append(
                    f"{'PASS' if ok else 'FAIL'} sparsity-accuracy trend: s=0 {acc[0.0]:.4f}, s=0.5 {acc[0.5]:.4f}, s=0.9 {acc[0.9]:.4f}"
                )
    if "m" in varying and len(varying) == 1:
        ordered = sorted(variants, key=lambda v: int(v.config["m"]))
        qs = [v.median("q_final") for v in ordered]
        ok = all(b <= a for a, b in zip(qs, qs[1:]))
        floor = min(min(r.num("q_final") for r in v.runs) - (1 - float(v.config["s"])) for v in ordered)
        lines.append(f"{'PASS' if ok else 'FAIL'} q non-increasing in m: {[round(q, 4) for q in qs]}")
        lines.append(f"{'PASS' if floor >= -1e-12 else 'FAIL'} q >= 1-s in every run")
    return lines


def report(paths: Sequence, out=None, threshold: Optional[float] = None) -> str:
    runs = [RunRecord(p) for p in find_runs(paths)]
    if not runs:
        raise ReportError("no completed runs found")
    tasks = sorted({r.config.get("task") for r in runs})
    if len(tasks) > 1:
        raise ReportError(f"cannot compare runs from different tasks: {tasks}")
    variants = group_variants(runs)
    keys = sorted({k for v in variants for k in v.config})
    varying = [k for k in keys if len({v.config.get(k) for v in variants}) > 1]
    variants.sort(key=lambda v: _sort_key(v, varying))
    if threshold is None:
        # 90% of the way from the starting loss to the worst variant's final loss
        worst = max(v.median("final_train_loss") for v in variants)
        first = float(np.median([r.losses[0] for r in runs if len(r.losses)]))
        threshold = worst + 0.1 * max(first - worst, 0.0)

    cols = ["variant", "seeds", "final_train_loss", "final_eval_loss", "steps_to_threshold", "peak_state_scalars", "q_final"]
    extra = [c for c in ("target_accuracy", "test_accuracy") if c in runs[0].summary]
    cols += extra
    rows = []
    for v in variants:
        stt = float(np.median([steps_to_threshold(r.losses, threshold) for r in v.runs]))
        row = [
            _label(v, varying), str(len(v.runs)), f"{v.median('final_train_loss'):.4f}", f"{v.median('final_eval_loss'):.4f}",
            "nan" if math.isnan(stt) else f"{stt:.0f}", f"{v.median('peak_state_scalars'):.0f}", f"{v.median('q_final'):.4f}",
        ]
        row += [f"{v.median(c):.4f}" for c in extra]
        rows.append(row)
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    fmt = lambda r: "  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip()  # noqa: E731
    lines = [f"task: {tasks[0]}   steps-to-threshold at loss {threshold:.4f}", fmt(cols)] + [fmt(r) for r in rows]
    if len(variants) > 1:
        lines += [""] + criteria_lines(variants, varying)

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for v in variants:
            name = _label(v, varying).replace("/", "_").replace(",", "__")
            curves = np.array([r.losses for r in v.runs if len(r.losses) == len(v.runs[0].losses)])
            med = np.median(curves, axis=0)
            with open(out / f"plot_{name}.csv", "w") as f:
                f.write("step,median_loss,smoothed_loss\n")
                for i, (a, b) in enumerate(zip(med, _smoothed(med))):
                    f.write(f"{i},{float(a)!r},{float(b)!r}\n")
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    return "\n".join(lines)
