"""Cross-modal low-rank adapters for dual-encoder transformers."""

import json

from ._core import (
    ConfigError,
    DualModel,
    NumericError,
    ShapeError,
    UsageError,
    parameter_matched_lora_rank,
)
from . import _core

__all__ = [
    "ConfigError",
    "DualModel",
    "NumericError",
    "ShapeError",
    "UsageError",
    "count_params",
    "flops",
    "gradcheck",
    "parameter_matched_lora_rank",
    "resolve_config",
    "train",
]


def count_params(preset="vitb-bertb", mode="cola", rank=16, gamma=16, alpha=8.0):
    return json.loads(_core.count_json(preset, mode, rank, gamma, alpha))


def flops(preset="vitb-bertb", mode="cola", rank=16, gamma=16, tokens_m=197, tokens_c=40, strategy="progressive"):
    return json.loads(_core.flops_json(preset, mode, rank, gamma, tokens_m, tokens_c, strategy))


def _text(config):
    return config if isinstance(config, str) else json.dumps(config)


def resolve_config(config):
    return json.loads(_core.resolve_config(_text(config)))


def gradcheck(config):
    """Per-class autodiff vs finite-difference comparison on a randomized model."""
    return _core.gradcheck(_text(config))


def train(config):
    """Runs one training job; returns (metrics dict, lambda trace csv)."""
    metrics, lambdas = _core.train_json(_text(config))
    return json.loads(metrics), lambdas
