import math

import numpy as np
import pytest

from blockgrad import tensor as T
from blockgrad.errors import ConfigError, StateError
from blockgrad.models import (
    ModelConfig,
    build_mlp,
    build_tiny_transformer,
    forward_loss,
    load_checkpoint,
    named_layers,
    read_container,
    save_checkpoint,
)


def mlp_4_8_3(seed=0):
    return build_mlp(ModelConfig(kind="mlp", widths=[4, 8, 3], seed=seed))


def small_tf(**kw):
    cfg = dict(kind="tiny-transformer", vocab=32, d_model=16, n_blocks=2, n_heads=1, d_ff=32, context=8, seed=0)
    cfg.update(kw)
    return build_tiny_transformer(ModelConfig(**cfg))


def test_mlp_registry():
    reg = named_layers(mlp_4_8_3())
    assert reg.names() == ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]
    assert reg.n == 4 * 8 + 8 + 8 * 3 + 3 == 67
    assert reg.names() == named_layers(mlp_4_8_3()).names()
    assert sum(c for _, _, c in reg.entries()) == reg.n


def test_mlp_init_deterministic_and_scaled():
    a, b = mlp_4_8_3(5), mlp_4_8_3(5)
    for k in a.registry:
        assert a.registry[k].data.tobytes() == b.registry[k].data.tobytes()
    big = build_mlp(ModelConfig(widths=[400, 300, 2], seed=0))
    assert np.std(big.registry["fc0.weight"].data) == pytest.approx(math.sqrt(2 / 400), rel=0.02)
    np.testing.assert_array_equal(big.registry["fc0.bias"].data, 0)


def test_mlp_zero_input_gives_ln3():
    model = mlp_4_8_3()
    x = np.zeros((5, 4))
    np.testing.assert_array_equal(model.logits(x).data, 0)
    _, phi = forward_loss(model, (x, [0, 1, 2, 0, 1]))
    assert phi == pytest.approx(math.log(3), abs=1e-6)


def test_mlp_config_errors():
    with pytest.raises(ConfigError):
        build_mlp(ModelConfig(widths=[4, 0, 3]))
    with pytest.raises(ConfigError):
        build_mlp(ModelConfig(widths=[4, 3]))


def test_perfect_logits_and_repeatability():
    model = mlp_4_8_3()
    model.registry["fc1.bias"].data[:] = [40.0, 0.0, 0.0]
    x = np.zeros((3, 4))
    _, phi = forward_loss(model, (x, [0, 0, 0]))
    assert phi < 1e-6
    rng = np.random.default_rng(1)
    batch = (rng.normal(size=(6, 4)), rng.integers(3, size=6))
    assert forward_loss(model, batch)[1] == forward_loss(model, batch)[1]


def test_transformer_registry_count():
    reg = small_tf().registry
    assert len(reg) == 1 + 2 * (4 + 2 + 4) + 1 == 22
    assert len(set(reg.names())) == 22
    assert len(small_tf(tied_head=True).registry) == 21


def test_transformer_head_divisibility():
    with pytest.raises(ConfigError):
        small_tf(d_model=15, n_heads=2)
    with pytest.raises(ConfigError):
        small_tf(context=1)


def test_causal_mask():
    model = small_tf(n_heads=2)
    rng = np.random.default_rng(0)
    a = rng.integers(32, size=(1, 8))
    b = a.copy()
    b[0, 5:] = (b[0, 5:] + 7) % 32
    za, zb = model.logits(a).data, model.logits(b).data
    np.testing.assert_array_equal(za[0, :5], zb[0, :5])
    assert not np.allclose(za[0, 5:], zb[0, 5:])


@pytest.mark.parametrize("seed", range(5))
def test_transformer_init_loss_near_ln_vocab(seed):
    model = small_tf(seed=seed)
    rng = np.random.default_rng(100 + seed)
    toks = rng.integers(32, size=(8, 9))
    _, phi = forward_loss(model, (toks[:, :-1], toks[:, 1:]))
    assert abs(phi - math.log(32)) / math.log(32) < 0.10


def test_token_out_of_range():
    model = small_tf()
    with pytest.raises(IndexError):
        model.loss((np.array([[1, 2, 40]]), np.array([[2, 3, 4]])))


def test_checkpoint_roundtrip(tmp_path):
    model = small_tf()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw.startswith(b"BGCKPT1\n")
    # first entry: name length, name, rank, dims
    nlen = int.from_bytes(raw[8:12], "little")
    assert raw[12 : 12 + nlen] == b"embed.weight"
    rank = int.from_bytes(raw[12 + nlen : 16 + nlen], "little")
    assert rank == 2
    other = small_tf(seed=9)
    load_checkpoint(other, path)
    for k in model.registry:
        np.testing.assert_array_equal(other.registry[k].data, model.registry[k].data)
    assert list(read_container(path)) == model.registry.names()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTCKPT\n")
    with pytest.raises(StateError):
        read_container(p)


def test_f64_models():
    with T.precision("float64"):
        model = mlp_4_8_3()
    assert model.registry["fc0.weight"].data.dtype == np.float64
