"""Dual-pooling attention: OBR blocks, channel-pooling and spatial-pooling branches."""
from __future__ import annotations

import enum

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Parameter, Tensor
from .exceptions import ShapeMismatch, SpatialSizeMismatch
from .nn import BatchNorm2d, Conv2d, Linear, Module, fan_in_normal
from .pooling import GemParams, PoolAxis, SoftMode, avg_pool, gem_pool, min_pool, soft_pool


class Fusion(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


def _contrast(x: Tensor, axis: PoolAxis, gem: GemParams) -> Tensor:
    """GeM minus MinP, with MinP read on the same floor-clamped region GeM sees.

    Clamping commutes with the minimum, so this only differs from the plain
    minimum below the floor; it keeps the result exactly 0 on any constant
    region and never negative.
    """
    return F.sub(gem_pool(x, axis, gem), min_pool(F.clamp_min(x, gem.clamp_floor), axis))


class ObrBlock(Module):
    """Dynamic 3×3 convolution -> batch norm -> ReLU.

    The effective kernel for sample n is ``sum_k w[n, k] * kernels[k]`` where
    ``w[n]`` is a softmax over a linear map of the input's global average. By
    linearity this equals mixing the K candidate convolution outputs, which is
    how the forward pass evaluates it.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, num_kernels: int = 4):
        super().__init__()
        if num_kernels < 1:
            raise ValueError("num_kernels must be >= 1")
        fan_in = in_channels * 9
        self.kernels = [Parameter(fan_in_normal(rng, (out_channels, in_channels, 3, 3), fan_in))
                        for _ in range(num_kernels)]
        self.kernel_attention = Linear(in_channels, num_kernels, rng)
        self.bn = BatchNorm2d(out_channels)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.num_kernels = num_kernels

    def mixing_weights(self, x: Tensor) -> Tensor:
        squeezed = F.mean(x, axis=(2, 3))
        return F.softmax(self.kernel_attention(squeezed), axis=1)

    def aggregated_kernels(self, x: Tensor) -> np.ndarray:
        """Per-sample mixed kernels, N×C_out×C_in×3×3 (inspection only)."""
        w = self.mixing_weights(x).data
        stacked = np.stack([k.data for k in self.kernels])
        return np.einsum("nk,koihw->noihw", w, stacked)

    def dynamic_conv(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"OBR block expects {self.in_channels} channels, got {x.shape}")
        n, _, h, w = x.shape
        mix = self.mixing_weights(x)
        weight = self.kernels[0] if self.num_kernels == 1 else F.concat(self.kernels, axis=0)
        y = F.conv2d(x, weight, None, 1, 1)
        y = F.reshape(y, (n, self.num_kernels, self.out_channels * h * w))
        y = F.sum(F.mul(y, F.reshape(mix, (n, self.num_kernels, 1))), axis=1)
        return F.reshape(y, (n, self.out_channels, h, w))

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.dynamic_conv(x)))


class CpaModule(Module):
    """Channel-pooling attention branch."""

    def __init__(self, channels: int, rng: np.random.Generator, num_kernels: int = 4,
                 gem: GemParams | None = None):
        super().__init__()
        self.conv_a1 = Conv2d(channels, channels, 1, rng, bias=True)
        self.obr1 = ObrBlock(channels, channels, rng, num_kernels)
        self.obr2 = ObrBlock(channels, channels, rng, num_kernels)
        self.gem = gem or GemParams()
        self.channels = channels

    def descriptors(self, x: Tensor):
        """Return ``(a1, a2, c_star)``."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"CpA expects N×{self.channels}×H×W, got {x.shape}")
        mixed = F.add(avg_pool(x, PoolAxis.SPATIAL), soft_pool(x, PoolAxis.SPATIAL, SoftMode.RETAINED_MAP))
        a1 = self.conv_a1(mixed)
        a2 = _contrast(x, PoolAxis.SPATIAL, self.gem)
        return a1, a2, F.mul(a1, a2)

    def forward(self, x: Tensor) -> Tensor:
        _, _, c_star = self.descriptors(x)
        return F.sigmoid(F.add(self.obr2(self.obr1(c_star)), x))


class SpaModule(Module):
    """Spatial-pooling attention branch, bound to one H×W at construction."""

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator,
                 num_kernels: int = 4, gem: GemParams | None = None):
        super().__init__()
        hw = height * width
        self.conv_b1 = Conv2d(hw, hw, 1, rng, bias=True)
        self.expand_proj = Conv2d(2 * hw, channels, 1, rng, bias=True)
        self.obr1 = ObrBlock(channels, channels, rng, num_kernels)
        self.obr2 = ObrBlock(channels, channels, rng, num_kernels)
        self.gem = gem or GemParams()
        self.channels = channels
        self.bound_hw = (height, width)

    def descriptors(self, x: Tensor):
        """Return ``(b1, b2, s_star)``; b1/b2 are N×HW×1×1, s_star N×2HW×1×1."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"SpA expects N×{self.channels}×H×W, got {x.shape}")
        if tuple(x.shape[2:]) != self.bound_hw:
            raise SpatialSizeMismatch(f"SpA bound to {self.bound_hw}, got {tuple(x.shape[2:])}")
        mixed = F.add(avg_pool(x, PoolAxis.CHANNEL), soft_pool(x, PoolAxis.CHANNEL, SoftMode.SCALAR))
        b1 = self.conv_b1(mixed)
        b2 = _contrast(x, PoolAxis.CHANNEL, self.gem)
        return b1, b2, F.concat([b1, b2], axis=1)

    def forward(self, x: Tensor) -> Tensor:
        _, _, s_star = self.descriptors(x)
        expanded = self.expand_proj(s_star)
        return F.sigmoid(F.add(self.obr2(self.obr1(expanded)), x))


class DpaModule(Module):
    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator,
                 num_kernels: int = 4, fusion: Fusion | str = Fusion.MEAN, gem: GemParams | None = None,
                 use_cpa: bool = True, use_spa: bool = True):
        super().__init__()
        if not (use_cpa or use_spa):
            raise ValueError("at least one branch must be enabled")
        self.cpa = CpaModule(channels, rng, num_kernels, gem) if use_cpa else None
        self.spa = SpaModule(channels, height, width, rng, num_kernels, gem) if use_spa else None
        self.fusion = Fusion(fusion)

    def forward(self, x: Tensor) -> Tensor:
        outs = [branch(x) for branch in (self.cpa, self.spa) if branch is not None]
        if len(outs) == 1:
            return outs[0]
        fused = F.add(outs[0], outs[1])
        return F.mul(fused, 0.5) if self.fusion is Fusion.MEAN else fused
