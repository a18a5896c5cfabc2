"""Toy models whose trainable tensors live in an ordered, named registry.

Each registry entry is one selectable block. Weights are stored as
``fan_in x fan_out`` so that a dense layer is ``x @ W + b``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .tensor import Tensor


class LayerRegistry:
    """Ordered ``name -> Tensor`` map; the unit of block selection."""

    def __init__(self, entries: Sequence[Tuple[str, Tensor]] = ()):
        self._layers: Dict[str, Tensor] = {}
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._layers:
            raise ConfigError(f"duplicate layer name {name!r}")
        t.name = name
        t.requires_grad = True
        self._layers[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._layers[name]

    def __contains__(self, name) -> bool:
        return name in self._layers

    def __len__(self) -> int:
        return len(self._layers)

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def names(self) -> List[str]:
        return list(self._layers)

    def entries(self) -> List[Tuple[str, Tensor, int]]:
        return [(k, t, t.size) for k, t in self._layers.items()]

    def count(self, name: str) -> int:
        return self._layers[name].size

    def counts(self) -> Dict[str, int]:
        return {k: t.size for k, t in self._layers.items()}

    @property
    def n(self) -> int:
        return sum(t.size for t in self._layers.values())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._layers.items()}

    def load(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, t in self._layers.items():
            if k not in arrays:
                raise StateError(f"missing layer {k!r} in loaded weights")
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise StateError(f"layer {k!r}: shape {a.shape} != {t.shape}")
            t.data = np.ascontiguousarray(a, dtype=t.data.dtype)

    def zero_grad(self) -> None:
        for t in self._layers.values():
            t.grad = None


@dataclass
class ModelConfig:
    kind: str = "mlp"  # "mlp" | "tiny-transformer"
    widths: List[int] = field(default_factory=lambda: [4, 8, 3])
    activation: str = "relu"
    vocab: int = 32
    d_model: int = 16
    n_blocks: int = 2
    n_heads: int = 1
    d_ff: int = 32
    context: int = 16
    tied_head: bool = False
    seed: int = 0


class Model:
    registry: LayerRegistry

    def logits(self, x) -> Tensor:
        raise NotImplementedError

    def loss(self, batch) -> Tensor:
        x, y = batch
        z = self.logits(x)
        if z.ndim == 3:
            z = T.reshape(z, (-1, z.shape[-1]))
        return T.softmax_cross_entropy(z, np.asarray(y).reshape(-1))


class MLP(Model):
    def __init__(self, cfg: ModelConfig):
        widths = list(cfg.widths)
        if len(widths) < 3:
            raise ConfigError("mlp needs input, at least one hidden, and output width")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"mlp widths must be positive, got {widths}")
        if cfg.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {cfg.activation!r}")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.registry = LayerRegistry()
        self.n_layers = len(widths) - 1
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / fi), size=(fi, fo))
            self.registry.add(f"fc{i}.weight", Tensor(w))
            self.registry.add(f"fc{i}.bias", Tensor(np.zeros(fo)))

    def logits(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        act = T.relu if self.cfg.activation == "relu" else T.gelu
        for i in range(self.n_layers):
            h = T.add(T.matmul(h, self.registry[f"fc{i}.weight"]), self.registry[f"fc{i}.bias"])
            if i < self.n_layers - 1:
                h = act(h)
        return h

    def accuracy(self, x, y) -> float:
        z = self.logits(x).data
        return float((z.argmax(axis=1) == np.asarray(y)).mean())


def sinusoidal_positions(context: int, d: int) -> np.ndarray:
    pos = np.arange(context)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TinyTransformer(Model):
    """Pre-norm decoder: embed + fixed sinusoidal positions, blocks of causal
    attention and a GELU FFN, then an (optionally tied) linear head."""

    def __init__(self, cfg: ModelConfig):
        d, h = cfg.d_model, cfg.n_heads
        for key in ("vocab", "d_model", "n_blocks", "n_heads", "d_ff", "context"):
            if getattr(cfg, key) <= 0:
                raise ConfigError(f"tiny-transformer {key} must be positive")
        if h > 2:
            raise ConfigError("tiny-transformer supports 1 or 2 heads")
        if d % h:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={h}")
        if cfg.context < 2:
            raise ConfigError("context length must be at least 2")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        reg = self.registry = LayerRegistry()
        # untied head reads logits off the residual stream, so embeddings stay O(1)
        emb_std = 1.0 / math.sqrt(d) if cfg.tied_head else 1.0
        reg.add("embed.weight", Tensor(rng.normal(0.0, emb_std, size=(cfg.vocab, d))))
        out_std = 1.0 / math.sqrt(2 * cfg.n_blocks)
        for b in range(cfg.n_blocks):
            p = f"blocks.{b}."
            reg.add(p + "ln1.gain", Tensor(np.ones(d)))
            reg.add(p + "ln1.bias", Tensor(np.zeros(d)))
            for m in ("wq", "wk", "wv"):
                reg.add(p + "attn." + m, Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))))
            reg.add(p + "attn.wo", Tensor(rng.normal(0.0, out_std / math.sqrt(d), size=(d, d))))
            reg.add(p + "ln2.gain", Tensor(np.ones(d)))
            reg.add(p + "ln2.bias", Tensor(np.zeros(d)))
            reg.add(p + "ffn.w1", Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.d_ff))))
            reg.add(p + "ffn.w2", Tensor(rng.normal(0.0, out_std / math.sqrt(cfg.d_ff), size=(cfg.d_ff, d))))
        if not cfg.tied_head:
            reg.add("head.weight", Tensor(rng.normal(0.0, 0.02, size=(d, cfg.vocab))))
        self._pos = sinusoidal_positions(cfg.context, d)

    def _attention(self, x: Tensor, b: int) -> Tensor:
        reg, cfg = self.registry, self.cfg
        B, L, d = x.shape
        H = cfg.n_heads
        dh = d // H
        p = f"blocks.{b}.attn."

        def heads(t):
            return T.permute(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(T.matmul(x, reg[p + "wq"]))
        k = heads(T.matmul(x, reg[p + "wk"]))
        v = heads(T.matmul(x, reg[p + "wv"]))
        att = T.causal_softmax(T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)))
        o = T.reshape(T.permute(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        return T.matmul(o, reg[p + "wo"])

    def logits(self, tokens) -> Tensor:
        reg, cfg = self.registry, self.cfg
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        if L > cfg.context:
            raise ConfigError(f"sequence length {L} exceeds context {cfg.context}")
        emb = reg["embed.weight"]
        x = T.embedding(emb, ids)
        pos = np.broadcast_to(self._pos[:L], (B, L, cfg.d_model))
        x = T.add(x, Tensor(pos, dtype=emb.data.dtype))
        for b in range(cfg.n_blocks):
            p = f"blocks.{b}."
            x = T.add(x, self._attention(T.layer_norm(x, reg[p + "ln1.gain"], reg[p + "ln1.bias"]), b))
            h = T.layer_norm(x, reg[p + "ln2.gain"], reg[p + "ln2.bias"])
            x = T.add(x, T.matmul(T.gelu(T.matmul(h, reg[p + "ffn.w1"])), reg[p + "ffn.w2"]))
        if cfg.tied_head:
            return T.scale(T.matmul(x, T.permute(emb, (1, 0))), 1.0 / math.sqrt(cfg.d_model))
        return T.matmul(x, reg["head.weight"])


def build_mlp(cfg: ModelConfig) -> MLP:
    return MLP(cfg)


def build_tiny_transformer(cfg: ModelConfig) -> TinyTransformer:
    return TinyTransformer(cfg)


def build_model(cfg: ModelConfig) -> Model:
    if cfg.kind == "mlp":
        return MLP(cfg)
    if cfg.kind == "tiny-transformer":
        return TinyTransformer(cfg)
    raise ConfigError(f"unknown model kind {cfg.kind!r}")


def named_layers(model: Model) -> LayerRegistry:
    return model.registry


def forward_loss(model: Model, batch) -> Tuple[Tensor, float]:
    """Graph-attached loss and its detached float value."""
    loss = model.loss(batch)
    return loss, float(loss.data)


# ---------------------------------------------------------------------------
# binary container: magic, then per entry u32 name length, name, u32 rank,
# u32 dims, little-endian f32 payload; entries run to end of file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"BGCKPT1\n"


def write_container(path, arrays: Dict[str, np.ndarray], magic: bytes = CKPT_MAGIC) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        for name, arr in arrays.items():
            a = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_container(path, magic: bytes = CKPT_MAGIC) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(magic):
        raise StateError(f"{path}: bad magic, expected {magic!r}")
    out: Dict[str, np.ndarray] = {}
    pos = len(magic)
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise StateError(f"{path}: truncated container ({exc})") from None
    return out


def save_checkpoint(model: Model, path) -> None:
    write_container(path, model.registry.snapshot())


def load_checkpoint(model: Model, path) -> None:
    model.registry.load(read_container(path))
