"""Desk-scale residual backbone with optional DpA insertion and a BNNeck head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .attention import DpaModule, Fusion
from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .exceptions import ConfigInvalid, SpatialSizeMismatch
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .pooling import GemParams, PoolAxis, gem_pool

BRANCHES = ("dpa", "cpa", "spa")


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    input_size: tuple = (32, 32)
    dpa_after_stage: tuple = (2,)
    fusion: str = "mean"
    gem_alpha: float = 3.0
    num_classes: int = 20
    num_kernels: int = 4
    attention: str = "dpa"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.dpa_after_stage = tuple(sorted({int(s) for s in self.dpa_after_stage}))
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[-1]

    def validate(self):
        if not self.stage_channels or len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigInvalid("stage_channels and blocks_per_stage must be non-empty and equal length")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigInvalid("channel and block counts must be positive")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigInvalid(f"bad input_size {self.input_size}")
        bad = [s for s in self.dpa_after_stage if not 0 <= s < len(self.stage_channels)]
        if bad:
            raise ConfigInvalid(f"dpa_after_stage indices out of range: {bad}")
        if self.num_classes < 2:
            raise ConfigInvalid("num_classes must be >= 2")
        if self.num_kernels < 1:
            raise ConfigInvalid("num_kernels must be >= 1")
        if self.attention not in BRANCHES:
            raise ConfigInvalid(f"attention must be one of {BRANCHES}")
        try:
            Fusion(self.fusion)
            GemParams(self.gem_alpha)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def stage_sizes(self) -> list:
        """Feature-map H×W at the output of each stage."""
        h, w = self.input_size
        sizes = []
        for i in range(len(self.stage_channels)):
            if i > 0:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            sizes.append((h, w))
        return sizes


class ModelOutput(NamedTuple):
    features: Tensor   # pre-neck pooled features (triplet input)
    embedding: Tensor  # post-neck features (retrieval)
    logits: Tensor


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        self.bn2 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.down_conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride)
            self.down_bn = BatchNorm2d(out_channels)
        else:
            self.down_conv = self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = self.down_bn(self.down_conv(x)) if self.down_conv is not None else x
        return F.relu(F.add(y, skip))


class ReIdModel(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        self.stem_conv = Conv2d(3, c0, 3, rng)
        self.stem_bn = BatchNorm2d(c0)
        self.stages = []
        self.attention = []
        sizes = cfg.stage_sizes()
        prev = c0
        for i, (ch, nblocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for b in range(nblocks):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(BasicBlock(prev, ch, stride, rng))
                prev = ch
            self.stages.append(_Sequential(blocks))
            if i in cfg.dpa_after_stage:
                h, w = sizes[i]
                self.attention.append(DpaModule(
                    ch, h, w, rng, cfg.num_kernels, cfg.fusion, GemParams(cfg.gem_alpha),
                    use_cpa=cfg.attention in ("dpa", "cpa"), use_spa=cfg.attention in ("dpa", "spa")))
            else:
                self.attention.append(None)
        self.gem = GemParams(cfg.gem_alpha)
        self.neck = BatchNorm2d(cfg.embed_dim)
        self.classifier = Linear(cfg.embed_dim, cfg.num_classes, rng, bias=False)

    def forward(self, images) -> ModelOutput:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.cfg.input_size:
            raise SpatialSizeMismatch(f"expected N×3×{self.cfg.input_size}, got {x.shape}")
        x = F.relu(self.stem_bn(self.stem_conv(x)))
        for stage, attn in zip(self.stages, self.attention):
            x = stage(x)
            if attn is not None:
                x = attn(x)
        pooled = gem_pool(x, PoolAxis.SPATIAL, self.gem)  # N×C×1×1
        n, c = pooled.shape[:2]
        features = F.reshape(pooled, (n, c))
        embedding = F.reshape(self.neck(pooled), (n, c))
        return ModelOutput(features, embedding, self.classifier(embedding))

    def attention_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith("attention.")]


class _Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_model(cfg: BackboneConfig, seed: int = 0) -> ReIdModel:
    model = ReIdModel(cfg, np.random.default_rng(seed))
    model.parameters()  # assigns dotted names
    return model
