"""Music tagging transformer: a 3-block residual CNN front end feeding a
BERT-style encoder that classifies from a prepended CLS token."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..errors import LengthError, ParameterError, ShapeError
from ..tensor import functional as F
from ..tensor.nn import BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Module, Parameter


@dataclass
class TransformerConfig:
    conv_channels: int = 128
    attn_dim: int = 256
    n_layers: int = 4
    n_heads: int = 8
    ffn_dim: int | None = None  # defaults to 4 * attn_dim
    dropout: float = 0.1
    max_seq_len: int = 512
    n_tags: int = 50
    n_mels: int = 128

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.attn_dim
        if self.attn_dim % self.n_heads:
            raise ParameterError(f"attn_dim {self.attn_dim} not divisible by n_heads {self.n_heads}")
        if self.n_mels % 8:
            raise ParameterError(f"n_mels {self.n_mels} must be divisible by 8")
        if min(self.conv_channels, self.n_layers, self.max_seq_len, self.n_tags) < 1:
            raise ParameterError("conv_channels, n_layers, max_seq_len and n_tags must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "default": dict(),
    # knowledge-distillation student, sized near 0.5M parameters
    "kd": dict(conv_channels=48, attn_dim=96, n_layers=2, n_heads=4),
    # desk-scale model for CPU experiments on synthetic data
    "desk": dict(conv_channels=16, attn_dim=64, n_layers=2, n_heads=4),
    # smaller student for distillation runs against the desk teacher
    "desk-kd": dict(conv_channels=8, attn_dim=32, n_layers=1, n_heads=4),
}


def preset(name: str, **overrides) -> TransformerConfig:
    if name not in PRESETS:
        raise ParameterError(f"unknown transformer preset {name!r}; choose from {sorted(PRESETS)}")
    return TransformerConfig(**{**PRESETS[name], **overrides})


class ResBlock(Module):
    """relu(bn(conv3x3(x)) + shortcut(x)); 1x1-conv shortcut when channels change."""

    def __init__(self, c_in: int, c_out: int, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn = BatchNorm2d(c_out)
        self.shortcut = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.bn(self.conv(x)) + skip)


class FrontEnd(Module):
    def __init__(self, cfg: TransformerConfig, rng):
        super().__init__()
        c = cfg.conv_channels
        self.input_bn = BatchNorm2d(1)
        self.block1 = ResBlock(1, c, rng)
        self.block2 = ResBlock(c, c, rng)
        self.block3 = ResBlock(c, c, rng)
        self.proj = Linear(c * cfg.n_mels // 8, cfg.attn_dim, rng)
        self.n_mels = cfg.n_mels

    def forward(self, x, trace: list | None = None):
        B, _, n_mels, n_frames = x.shape
        if n_mels % 8 or n_mels != self.n_mels:
            raise ShapeError(f"front end expects {self.n_mels} mel bins (divisible by 8), got {n_mels}")
        if n_frames < 4:
            raise ShapeError(f"need at least 4 frames, got {n_frames}")
        if n_frames % 4:
            x = x[:, :, :, : n_frames - n_frames % 4]
        x = self.input_bn(x)
        steps = [
            ("conv1", self.block1), ("pool1", (2, 2)),
            ("conv2", self.block2), ("pool2", (2, 2)),
            ("conv3", self.block3), ("pool3", (2, 1)),
        ]
        for name, op in steps:
            x = F.maxpool2d(x, op) if isinstance(op, tuple) else op(x)
            if trace is not None:
                trace.append((name, x.shape))
        B, C, Fr, L = x.shape
        x = x.reshape(B, C * Fr, L)
        if trace is not None:
            trace.append(("reshape", x.shape))
        x = self.proj(x.transpose(0, 2, 1)).transpose(0, 2, 1)
        if trace is not None:
            trace.append(("fc", x.shape))
        return x


def attention(q, k, v, dropout_p: float = 0.0, training: bool = False, rng=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V over [B, h, L, d_k] tensors, unmasked."""
    if not (q.shape == k.shape and k.shape[:-1] == v.shape[:-1]) or q.ndim != 4:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    d_k = q.shape[-1]
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / np.sqrt(d_k))
    weights = F.softmax(scores, axis=-1)
    out = F.dropout(weights, dropout_p, training, rng) @ v
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, dropout: float, rng):
        super().__init__()
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.n_heads = n_heads
        self.p = dropout

    def _split(self, x):
        B, L, D = x.shape
        return x.reshape(B, L, self.n_heads, D // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x):
        B, L, D = x.shape
        ctx = attention(
            self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)),
            self.p, self.training, self.rng,
        )
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(B, L, D))


class EncoderLayer(Module):
    """Post-layernorm encoder layer: attention and GELU feed-forward sublayers."""

    def __init__(self, cfg: TransformerConfig, rng):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.attn_dim, cfg.n_heads, cfg.dropout, rng)
        self.drop1 = Dropout(cfg.dropout)
        self.norm1 = LayerNorm(cfg.attn_dim)
        self.ff1 = Linear(cfg.attn_dim, cfg.ffn_dim, rng)
        self.ff2 = Linear(cfg.ffn_dim, cfg.attn_dim, rng)
        self.drop2 = Dropout(cfg.dropout)
        self.norm2 = LayerNorm(cfg.attn_dim)

    def forward(self, x):
        x = self.norm1(x + self.drop1(self.attn(x)))
        return self.norm2(x + self.drop2(self.ff2(F.gelu(self.ff1(x)))))


class Encoder(Module):
    def __init__(self, cfg: TransformerConfig, rng):
        super().__init__()
        self.cls = Parameter(rng.normal(0, 0.02, (1, 1, cfg.attn_dim)))
        self.pos = Parameter(rng.normal(0, 0.02, (cfg.max_seq_len, cfg.attn_dim)))
        self.drop = Dropout(cfg.dropout)
        self.layers = []
        for i in range(cfg.n_layers):
            layer = EncoderLayer(cfg, rng)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
        self.max_seq_len = cfg.max_seq_len

    def forward(self, seq):
        """[B, C', L] -> CLS output [B, C']."""
        B, D, L = seq.shape
        if L + 1 > self.max_seq_len:
            raise LengthError(f"sequence of {L} tokens plus CLS exceeds max_seq_len={self.max_seq_len}")
        x = seq.transpose(0, 2, 1)
        cls = self.cls + np.zeros((B, 1, D), dtype=x.dtype)
        x = T.concat([cls, x], axis=1) + self.pos[: L + 1]
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x)
        return x[:, 0, :]


class MusicTaggingTransformer(Module):
    model_type = "transformer"

    def __init__(self, cfg: TransformerConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or TransformerConfig()
        rng = np.random.default_rng([seed, 1])
        self.cfg = cfg
        self.frontend = FrontEnd(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.head = Linear(cfg.attn_dim, cfg.n_tags, rng)
        self.set_rng(np.random.default_rng([seed, 2]))

    def forward(self, x):
        """Log-mel batch [B, 1, F, T] -> tag probabilities [B, n_tags]."""
        x = _as_input(x, self)
        return F.sigmoid(self.head(self.encoder(self.frontend(x))))


def _as_input(x, model: Module):
    dtype = model.head.weight.dtype
    if isinstance(x, T.Tensor):
        return x if x.dtype == dtype else T.Tensor(x.data.astype(dtype))
    return T.Tensor(np.asarray(x, dtype=dtype))
