"""Adam moments kept only for the currently selected layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable

import numpy as np

from .errors import DimensionError, StateError


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class AdamState:
    """Per-layer first/second moments.

    ``bias_correction=False`` gives the uncorrected ``M / sqrt(V + eps)``
    form; the default is the usual ``M_hat / (sqrt(V_hat) + eps)``.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, bias_correction=True):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.bias_correction = bias_correction
        self.layers: Dict[str, Moments] = {}

    def __contains__(self, name) -> bool:
        return name in self.layers

    def keys(self):
        return self.layers.keys()

    def reset(self, names: Iterable[str], registry) -> None:
        """Drop every moment and start zeroed ones for exactly ``names``."""
        names = list(names)
        unknown = [k for k in names if k not in registry]
        if unknown:
            raise StateError(f"reset: unknown layer(s) {unknown}")
        fresh = {}
        for k in names:
            like = registry[k].data
            fresh[k] = Moments(np.zeros_like(like), np.zeros_like(like), 0)
        self.layers = fresh

    def step(self, name: str, grad: np.ndarray) -> np.ndarray:
        """Advance the moments of ``name`` with ``grad`` and return the
        processed gradient."""
        st = self.layers.get(name)
        if st is None:
            raise StateError(f"adam step for layer {name!r} which is not in the selected set")
        g = np.asarray(grad)
        if g.shape != st.m.shape:
            raise DimensionError(f"adam step {name!r}: grad {g.shape} vs state {st.m.shape}")
        b1, b2 = self.beta1, self.beta2
        st.m *= b1
        st.m += (1 - b1) * g
        st.v *= b2
        st.v += (1 - b2) * (g * g)
        st.step += 1
        if self.bias_correction:
            m_hat = st.m / (1 - b1**st.step)
            v_hat = st.v / (1 - b2**st.step)
            return m_hat / (np.sqrt(v_hat) + self.eps)
        return st.m / np.sqrt(st.v + self.eps)

    def state_scalars(self) -> int:
        return sum(st.m.size + st.v.size for st in self.layers.values())


def adam_step_layer(state: AdamState, layer: str, grad) -> np.ndarray:
    return state.step(layer, grad)


def reset_states(state: AdamState, new_selection: Iterable[str], registry) -> AdamState:
    state.reset(new_selection, registry)
    return state


def masked_update(weight: np.ndarray, processed: np.ndarray, mask: np.ndarray, lr: float) -> np.ndarray:
    """In-place ``W -= lr * (mask * G~)``; masked-out entries are not written."""
    if weight.shape != processed.shape or weight.shape != mask.shape:
        raise DimensionError(
            f"masked_update: weight {weight.shape}, update {processed.shape}, mask {mask.shape}"
        )
    keep = np.asarray(mask).astype(bool, copy=False)
    np.subtract(weight, lr * processed, out=weight, where=keep)
    return weight
