"""Transformers with multiway dynamic dense connections, on a small numpy
autograd engine."""

from .config import ABLATION_NAMES, ConfigError, ModelConfig, ModelVariant, ablation_variant
from .dense import ConnectionSchedule, realloc_ffn_dims
from .model import Model, build_model, decode_step, forward, forward_with_trace, loss_fn, new_cache

__all__ = [
    "ABLATION_NAMES", "ConfigError", "ConnectionSchedule", "Model", "ModelConfig", "ModelVariant",
    "ablation_variant", "build_model", "decode_step", "forward", "forward_with_trace", "loss_fn",
    "new_cache", "realloc_ffn_dims",
]
