"""Short-chunk ResNet baseline: seven residual blocks with 2x2 max pooling,
global max+average pooling, and a two-layer dense head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ParameterError, ShapeError
from ..tensor import concat, functional as F
from ..tensor.nn import BatchNorm2d, Conv2d, Dropout, Linear, Module
from .transformer import _as_input


@dataclass
class ResNetConfig:
    n_layers: int = 7
    channels: tuple = (128, 128, 256, 256, 256, 512, 512)
    dense_dim: int = 512
    dropout: float = 0.5
    n_tags: int = 50
    n_mels: int = 128

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.n_layers < 1:
            raise ParameterError("n_layers must be >= 1")
        if len(self.channels) != self.n_layers:
            raise ParameterError(f"need {self.n_layers} channel counts, got {len(self.channels)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


RESNET_PRESETS = {
    "default": dict(),
    "desk": dict(channels=(16,) * 7, dense_dim=32),
}


class Res2d(Module):
    """Two 3x3 convolutions with batchnorm and a projection shortcut."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(c_out)
        if c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = None

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.relu(h + skip)


class ShortChunkResNet(Module):
    model_type = "resnet"

    def __init__(self, cfg: ResNetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ResNetConfig()
        rng = np.random.default_rng([seed, 1])
        self.cfg = cfg
        self.input_bn = BatchNorm2d(1)
        self.blocks = []
        c_in = 1
        for i, c in enumerate(cfg.channels):
            block = Res2d(c_in, c, rng)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)
            c_in = c
        self.dense = Linear(2 * c_in, cfg.dense_dim, rng)
        self.drop = Dropout(cfg.dropout)
        self.head = Linear(cfg.dense_dim, cfg.n_tags, rng)
        self.set_rng(np.random.default_rng([seed, 2]))

    def forward(self, x):
        x = _as_input(x, self)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected [B, 1, F, T] input, got {x.shape}")
        x = self.input_bn(x)
        for block in self.blocks:
            x = block(x)
            # pool only along axes that still have room, so long and short inputs both work
            kernel = (2 if x.shape[2] >= 2 else 1, 2 if x.shape[3] >= 2 else 1)
            if kernel != (1, 1):
                x = F.maxpool2d(x, kernel)
        B, C, H, W = x.shape
        flat = x.reshape(B, C, H * W)
        pooled = concat([F.amax(flat, axis=-1), flat.mean(axis=-1)], axis=1)
        h = self.drop(F.relu(self.dense(pooled)))
        return F.sigmoid(self.head(h))
