"""Channel-spatial feature fusion of encoder skips with decoder features.

Both inputs are refined by 3x3 conv + BN + ReLU, concatenated, and fused back
to width C by another conv + BN + ReLU. The fused map is then gated twice:
a channel gate built from global average/max statistics pushed through a
shared bottleneck MLP (reduction 4), and a spatial gate built from per-pixel
channel average/max maps pushed through a 3x3 conv. Both gates are sigmoids,
so every gate value lies strictly inside (0, 1). Either gate can be disabled
for ablations, and ``StandardFusion`` provides the plain concat + conv
baseline.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor


class ChannelAttention(Module):
    """Per-channel gate from global spatial statistics."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigError(f"channels={channels} not divisible by reduction={reduction}")
        self.fc1 = Linear(channels, channels // reduction, bias=False, rng=rng)
        self.fc2 = Linear(channels // reduction, channels, bias=False, rng=rng)

    def _mlp(self, pooled: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(pooled)))

    def forward(self, x: Tensor):
        batch, height, width, channels = x.shape
        avg = x.mean(axis=(1, 2))
        mx = x.max(axis=(1, 2))
        gate = T.sigmoid(self._mlp(avg) + self._mlp(mx))
        gate = gate.reshape((batch, 1, 1, channels))
        return gate, gate * x


class SpatialAttention(Module):
    """Per-pixel gate from channel average/max maps through a 3x3 conv."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(2, 1, 3, padding=1, bias=False, rng=rng)

    def forward(self, x: Tensor):
        avg = x.mean(axis=-1, keepdims=True)
        mx = x.max(axis=-1, keepdims=True)
        gate = T.sigmoid(self.conv(T.concat([avg, mx], axis=-1)))
        return gate, gate * x


class CsffBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator,
                 use_channel_attn: bool = True, use_spatial_attn: bool = True):
        super().__init__()
        self.refine_skip = Conv2d(channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn_skip = BatchNorm2d(channels)
        self.refine_up = Conv2d(channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn_up = BatchNorm2d(channels)
        self.fuse = Conv2d(2 * channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn_fuse = BatchNorm2d(channels)
        self.channel_attn = ChannelAttention(channels, rng)
        self.spatial_attn = SpatialAttention(rng)
        self.use_channel_attn = use_channel_attn
        self.use_spatial_attn = use_spatial_attn
        self.capture = False
        self.captured = None

    def forward(self, skip: Tensor, up: Tensor) -> Tensor:
        if skip.shape != up.shape:
            raise ShapeError(f"fusion inputs differ: {skip.shape} vs {up.shape}")
        refined_skip = T.relu(self.bn_skip(self.refine_skip(skip)))
        refined_up = T.relu(self.bn_up(self.refine_up(up)))
        fused = T.relu(self.bn_fuse(self.fuse(T.concat([refined_skip, refined_up], axis=-1))))
        out = fused
        captured = {}
        if self.use_channel_attn:
            gate_c, out = self.channel_attn(out)
            captured["m_c"] = gate_c.data.copy()
        if self.use_spatial_attn:
            gate_s, out = self.spatial_attn(out)
            captured["m_s"] = gate_s.data.copy()
        if self.capture:
            self.captured = captured
        return out


class StandardFusion(Module):
    """Plain skip fusion baseline: concat, 3x3 conv, BN, ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.fuse = Conv2d(2 * channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, skip: Tensor, up: Tensor) -> Tensor:
        if skip.shape != up.shape:
            raise ShapeError(f"fusion inputs differ: {skip.shape} vs {up.shape}")
        return T.relu(self.bn(self.fuse(T.concat([skip, up], axis=-1))))
