"""Python bindings for the mhaff C++ core."""

import json as _json

from ._core import (
    MhaffError,
    ablate_qkv,
    accuracy,
    attention,
    attention_weights,
    compare_fusions,
    cross_entropy_loss,
    default_config,
    evaluate,
    export_heatmap,
    grad_cam,
    gradcheck,
    make_qkv,
    multi_head_attention,
    normalize_config,
    synth_image,
)
from ._core import train as _train


def config(**overrides):
    """Default config as a dict, with top-level keys replaced by `overrides`."""
    cfg = _json.loads(default_config())
    cfg.update(overrides)
    return cfg


def train(cfg=None, out_dir=None):
    """Train from a config dict (or JSON string) and return the report dict."""
    text = cfg if isinstance(cfg, str) else _json.dumps(cfg or {})
    return _train(text, out_dir)


__all__ = [
    "MhaffError",
    "ablate_qkv",
    "accuracy",
    "attention",
    "attention_weights",
    "compare_fusions",
    "config",
    "cross_entropy_loss",
    "default_config",
    "evaluate",
    "export_heatmap",
    "grad_cam",
    "gradcheck",
    "make_qkv",
    "multi_head_attention",
    "normalize_config",
    "synth_image",
    "train",
]
