"""Block-selective Adam training on a small numpy autodiff engine."""

from .adam import AdamState, masked_update
from .models import LayerRegistry, ModelConfig, build_model
from .selector import PolicyKind, SelectorConfig, select_param, should_reselect
from .trainer import RunMetrics, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "LayerRegistry",
    "ModelConfig",
    "PolicyKind",
    "RunMetrics",
    "SelectorConfig",
    "TrainConfig",
    "build_model",
    "masked_update",
    "select_param",
    "should_reselect",
    "train",
]
