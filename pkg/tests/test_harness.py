import io
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from blockgrad import harness
from blockgrad.cli import EXIT_ABORTED, EXIT_CONFIG, EXIT_REPORT, main
from blockgrad.errors import ConfigError
from blockgrad.trainer import CSV_HEADER, weight_delta_histogram

SEPARABLE = "task = separable\nsteps = 40\nseeds = 0,1\n"


def write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_and_defaults(tmp_path):
    cfg = harness.load_config(write(tmp_path, "# comment\ntask = markov-lm\n\ns = 0.7  # trailing\n"))
    assert cfg["task"] == "markov-lm" and cfg["s"] == 0.7
    assert cfg["steps"] == 2000 and cfg["policy"] == "blockllm"
    assert cfg["seeds"] == [0, 1, 2, 3, 4]


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError, match="task"):
        harness.load_config(write(tmp_path, "s = 0.5\n"))
    with pytest.raises(ConfigError, match=r":2: unknown key 'bogus'"):
        harness.load_config(write(tmp_path, "task = separable\nbogus = 3\n"))
    with pytest.raises(ConfigError, match="junk"):
        harness.load_config(write(tmp_path, "task = separable\njunk\n"))
    with pytest.raises(ConfigError, match="'steps'"):
        harness.load_config(write(tmp_path, "task = separable\nsteps = many\n"))
    with pytest.raises(ConfigError):
        harness.load_config(write(tmp_path, "task = separable\npolicy = greedy\n"))
    with pytest.raises(ConfigError):
        harness.load_config(write(tmp_path, "task = separable\ns = 1.5\n"))


def test_override_applies_to_all_runs(tmp_path):
    cfg_path = write(tmp_path, SEPARABLE)
    out = tmp_path / "out"
    assert main(["run", str(cfg_path), "--set", "policy=subopt", "--out", str(out)]) == 0
    for seed in (0, 1):
        summary = harness.read_kv(out / f"seed_{seed}" / "summary.txt")
        assert summary["policy"] == "subopt"
        assert harness.read_kv(out / f"seed_{seed}" / "config.txt")["policy"] == "subopt"


def test_run_artifacts_and_echo(tmp_path):
    cfg_path = write(tmp_path, SEPARABLE + "m = 7\n")
    out = tmp_path / "out"
    assert main(["run", str(cfg_path), "--seeds", "3", "--out", str(out)]) == 0
    d = out / "seed_3"
    assert sorted(p.name for p in d.iterdir()) == ["config.txt", "metrics.csv", "selection_trace.tsv", "summary.txt", "timing.txt"]
    echoed = harness.read_kv(d / "config.txt")
    assert echoed["m"] == "7" and echoed["seeds"] == "3"
    assert harness.resolve(echoed)["m"] == 7
    assert (d / "metrics.csv").read_text().startswith(CSV_HEADER)
    assert (d / "selection_trace.tsv").read_text().startswith("step\tpolicy\tn_s")
    keys = set(harness.read_kv(d / "summary.txt"))
    assert {"final_train_loss", "final_eval_loss", "peak_state_scalars", "q_final"} <= keys


def test_identical_invocations_byte_identical(tmp_path):
    cfg_path = write(tmp_path, SEPARABLE + "p = 1\n")
    for name in ("a", "b"):
        assert main(["run", str(cfg_path), "--out", str(tmp_path / name)]) == 0
    for seed in (0, 1):
        for f in ("metrics.csv", "summary.txt", "selection_trace.tsv"):
            assert (tmp_path / "a" / f"seed_{seed}" / f).read_bytes() == (tmp_path / "b" / f"seed_{seed}" / f).read_bytes()


def test_parallel_matches_serial(tmp_path, monkeypatch):
    cfg = harness.load_config(write(tmp_path, SEPARABLE))
    harness.run(cfg, tmp_path / "serial")
    monkeypatch.setenv("BG_THREADS", "2")
    harness.run(cfg, tmp_path / "par")
    for seed in (0, 1):
        a = (tmp_path / "serial" / f"seed_{seed}" / "metrics.csv").read_bytes()
        b = (tmp_path / "par" / f"seed_{seed}" / "metrics.csv").read_bytes()
        assert a == b


def test_exit_codes(tmp_path, capsys):
    assert main(["run", str(write(tmp_path, "steps = 3\n"))]) == EXIT_CONFIG
    assert "missing required key 'task'" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    nan_cfg = write(tmp_path, "task = separable\nlr = 1e38\nsteps = 30\nseeds = 0\n", "nan.cfg")
    with np.errstate(all="ignore"):
        assert main(["run", str(nan_cfg), "--out", str(tmp_path / "nan")]) == EXIT_ABORTED
    assert "step=" in (tmp_path / "nan" / "seed_0" / "aborted.txt").read_text()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "blockgrad", "run", str(tmp_path / "none.cfg")], capture_output=True, text=True)
    assert res.returncode == EXIT_CONFIG


def test_sweep_layout_and_errors(tmp_path):
    cfg = harness.load_config(write(tmp_path, SEPARABLE))
    res = harness.sweep(cfg, "s", ["0.5", "0.9"], out=tmp_path / "sw")
    assert set(res) == {"0.5", "0.9"}
    for v in ("0.5", "0.9"):
        assert sorted(p.name for p in (tmp_path / "sw" / f"s={v}").iterdir()) == ["seed_0", "seed_1"]
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "s", [], out=tmp_path / "x")
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "nonsense", ["1"], out=tmp_path / "x")
    text = harness.report([tmp_path / "sw"])
    assert "PASS state scalars non-increasing in s" in text


def fake_run(root, policy, seed, losses, task="markov-lm", **summary):
    d = Path(root) / f"policy={policy}" / f"seed_{seed}"
    d.mkdir(parents=True)
    (d / "config.txt").write_text(f"task = {task}\nseeds = {seed}\npolicy = {policy}\nout = {d}\n")
    rows = [CSV_HEADER] + [f"{i},train,{v!r},10,20,10,0.5,0" for i, v in enumerate(losses)]
    (d / "metrics.csv").write_text("\n".join(rows) + "\n")
    base = dict(final_train_loss=losses[-1], final_eval_loss=losses[-1], peak_state_scalars=20, q_final=0.5, max_layer_params=4)
    base.update(summary)
    (d / "summary.txt").write_text("".join(f"{k}={v}\n" for k, v in base.items()))
    return d


def test_report_single_run_has_no_criteria(tmp_path):
    fake_run(tmp_path, "blockllm", 0, [3.0, 2.0, 1.5])
    text = harness.report([tmp_path])
    lines = text.splitlines()
    assert len(lines) == 3 and lines[2].startswith("blockllm")
    assert "PASS" not in text and "FAIL" not in text


def test_report_delta_row(tmp_path):
    for seed in range(3):
        fake_run(tmp_path, "blockllm", seed, [3.0, 2.0, 1.0 + 0.01 * seed])
        fake_run(tmp_path, "subopt", seed, [3.0, 2.5, 1.2 + 0.01 * seed])
    text = harness.report([tmp_path], out=tmp_path / "rep")
    line = [ln for ln in text.splitlines() if "subopt-minus-blockllm" in ln][0]
    assert line.startswith("PASS") and "+0.2000" in line
    plot = (tmp_path / "rep" / "plot_policy=subopt.csv").read_text().splitlines()
    assert plot[0] == "step,median_loss,smoothed_loss" and len(plot) == 4
    assert float(plot[2].split(",")[1]) == 2.5


def test_report_delta_fail_when_not_positive(tmp_path):
    fake_run(tmp_path, "blockllm", 0, [3.0, 1.3])
    fake_run(tmp_path, "subopt", 0, [3.0, 1.2])
    assert "FAIL subopt-minus-blockllm" in harness.report([tmp_path])


def test_report_errors(tmp_path):
    fake_run(tmp_path / "a", "blockllm", 0, [1.0], task="markov-lm")
    fake_run(tmp_path / "b", "blockllm", 0, [1.0], task="separable")
    with pytest.raises(harness.ReportError):
        harness.report([tmp_path])
    with pytest.raises(harness.ReportError):
        harness.report([tmp_path / "empty_missing"])
    assert main(["report", str(tmp_path)]) == EXIT_REPORT


def test_steps_to_threshold_and_early_phase():
    losses = np.array([5.0] * 10 + [1.0] * 30)
    assert harness.steps_to_threshold(losses, 1.0) == 29
    assert np.isnan(harness.steps_to_threshold(losses, 0.5))
    assert harness.early_phase_loss(np.arange(10.0)) == pytest.approx(0.5)


def test_shift_finetune_weight_changes_mostly_small(tmp_path):
    """Dense finetuning after pretraining: most entries barely move."""
    fractions = []
    for seed in range(5):
        cfg = harness.resolve({"task": "shift-finetune", "policy": "full", "s": "0", "seeds": str(seed)})
        model, met, _ = harness._run_shift(cfg, seed, harness.train_config(cfg, seed), io.StringIO(), tmp_path)
        delta = weight_delta_histogram(met.initial, model.registry.snapshot(), 0.0)["delta"]
        fractions.append(float((delta < 0.2 * delta.max()).mean()))
    assert np.median(fractions) >= 0.8, fractions
