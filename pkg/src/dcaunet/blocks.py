"""Encoder/decoder building blocks: the attention block and resolution stages.

The attention block chains three residual sub-layers: a 3x3 depthwise
convolution, differential cross attention on the layer-normalized map, and a
2-layer MLP (expansion 4, GELU) on the layer-normalized result. Patch
embedding (4x4 stride 4), patch merging (2x2 -> double width), pixel-shuffle
upsampling (halve width), and the final 4x expansion handle all resolution
changes; odd feature maps are zero-padded bottom/right before merging so that
depth-4 hierarchies work for any input divisible by 4.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dca import DcaConfig, DifferentialCrossAttention
from .errors import GeometryError, ShapeError
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module
from .tensor import Tensor


class DcaBlock(Module):
    def __init__(self, cfg: DcaConfig, rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        channels = cfg.channels
        self.dwconv = Conv2d(channels, channels, 3, padding=1, groups=channels, rng=rng)
        self.norm1 = LayerNorm(channels)
        self.attn = DifferentialCrossAttention(cfg, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp = Mlp(channels, mlp_ratio * channels, rng=rng)

    def forward(self, z: Tensor) -> Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z.reshape((1,) + z.shape)
        z = self.dwconv(z) + z
        z = self.attn(self.norm1(z)) + z
        z = self.mlp(self.norm2(z)) + z
        return z.reshape(z.shape[1:]) if squeeze else z


class PatchEmbed(Module):
    """Non-overlapping 4x4 patch projection to the base width, then LayerNorm."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Conv2d(in_channels, width, 4, stride=4, rng=rng)
        self.norm = LayerNorm(width)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise GeometryError(f"patch embedding needs H,W divisible by 4, got {x.shape}")
        return self.norm(self.proj(x))


class PatchMerge(Module):
    """Concatenate each 2x2 pixel group (4C), normalize, reduce linearly to 2C.

    Odd extents are zero-padded on the bottom/right first, so merging is
    defined for every feature map; the matching decoder stage crops back.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(4 * channels)
        self.reduce = Linear(4 * channels, 2 * channels, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        _, height, width, _ = x.shape
        if height % 2 or width % 2:
            x = T.pad(x, ((0, 0), (0, height % 2), (0, width % 2), (0, 0)))
        quads = T.concat(
            [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :],
             x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]],
            axis=-1,
        )
        return self.reduce(self.norm(quads))


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """(B, H, W, r*r*c) -> (B, r*H, r*W, c); channel index factors as (u, v, c)."""
    batch, height, width, channels = x.shape
    if channels % (factor * factor) != 0:
        raise ShapeError(f"channels={channels} not divisible by {factor}^2")
    sub = channels // (factor * factor)
    x = x.reshape((batch, height, width, factor, factor, sub))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((batch, height * factor, width * factor, sub))


class Upsample(Module):
    """Double the resolution, halve the width: expand C -> 2C, shuffle, norm."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"upsample needs even channels, got {channels}")
        self.expand = Linear(channels, 2 * channels, bias=False, rng=rng)
        self.norm = LayerNorm(channels // 2)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(pixel_shuffle(self.expand(x), 2))


class FinalExpand(Module):
    """4x spatial expansion back to input resolution, keeping the width."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.expand = Linear(channels, 16 * channels, bias=False, rng=rng)
        self.norm = LayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(pixel_shuffle(self.expand(x), 4))
