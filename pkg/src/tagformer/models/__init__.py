"""Tagging models, chunk aggregation and checkpoint binding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError
from ..tensor import Checkpoint, load_checkpoint, no_grad, save_checkpoint
from ..tensor.nn import Module
from .resnet import RESNET_PRESETS, ResNetConfig, ShortChunkResNet
from .transformer import (
    PRESETS, MusicTaggingTransformer, TransformerConfig, attention, preset,
)

__all__ = [
    "MusicTaggingTransformer", "ShortChunkResNet", "TransformerConfig", "ResNetConfig",
    "TagPrediction", "aggregate_chunks", "attention", "build_model", "load_model",
    "model_checkpoint", "param_count", "predict", "preset", "save_model", "PRESETS", "RESNET_PRESETS",
]


@dataclass
class TagPrediction:
    probs: np.ndarray
    track_level: bool = False


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def aggregate_chunks(preds) -> TagPrediction:
    """Element-wise mean of chunk predictions."""
    preds = list(preds)
    if not preds:
        raise DataError("cannot aggregate zero chunk predictions")
    stack = np.stack([p.probs if isinstance(p, TagPrediction) else np.asarray(p) for p in preds])
    return TagPrediction(stack.mean(axis=0), track_level=True)


def predict(model: Module, batch: np.ndarray) -> np.ndarray:
    """Eval-mode forward without a graph; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            return model(batch).data
    finally:
        model.train(was_training)


def build_model(model_type: str, config: dict | None = None, seed: int = 0) -> Module:
    config = dict(config or {})
    if model_type == "transformer":
        return MusicTaggingTransformer(TransformerConfig(**config), seed=seed)
    if model_type == "resnet":
        return ShortChunkResNet(ResNetConfig(**config), seed=seed)
    raise ConfigError(f"unknown model type {model_type!r}")


def model_checkpoint(model: Module, metadata: dict | None = None) -> Checkpoint:
    params = {n: p.data for n, p in model.named_parameters()}
    buffers = dict(model.named_buffers())
    return Checkpoint(model.model_type, model.cfg.to_dict(), params, buffers, dict(metadata or {}))


def save_model(model: Module, path, metadata: dict | None = None):
    return save_checkpoint(model_checkpoint(model, metadata), path)


def model_from_checkpoint(ckpt: Checkpoint) -> Module:
    model = build_model(ckpt.model_type, ckpt.model_config)
    model.load_state_dict({**ckpt.params, **ckpt.buffers})
    return model


def load_model(path) -> tuple:
    """Returns (model, metadata)."""
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt.metadata
