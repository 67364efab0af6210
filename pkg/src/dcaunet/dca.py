"""Differential cross attention between pixel queries and window summary tokens.

Pixel-wise query tokens attend to key/value tokens that summarize
non-overlapping MxM spatial windows by average pooling, so the score matrix is
N x N_win instead of N x N. Attention weights are the difference of two
independent softmax maps, S1 - lambda * S2, which cancels attention mass the
two maps agree on (common-mode noise) while keeping each query row's total
weight at 1 - lambda. The scalar lambda is re-parameterized from four
learnable vectors and anchored by a depth-dependent constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, GeometryError, UsageError
from .nn import Linear, Module, Parameter
from .tensor import Tensor

ATTENTION_KINDS = ("differential", "standard")
LAMBDA_STRATEGIES = ("dynamic", "fixed")


def lambda_init(block_index: int) -> float:
    """Depth-dependent anchor for lambda: 0.2 at the first block, rising toward 0.8.

    Computed as 0.2 + 0.6 * (1 - exp(-0.3 * (block_index - 1))), which is
    exact (== 0.2) at block_index 1 and strictly increasing with depth.
    """
    if block_index < 1:
        raise UsageError(f"block_index must be >= 1, got {block_index}")
    return 0.2 + 0.6 * (1.0 - math.exp(-0.3 * (block_index - 1)))


@dataclass
class DcaConfig:
    """Geometry and behavior switches for one attention layer."""

    channels: int
    head_dim: int
    window: int = 7
    block_index: int = 1
    attention_kind: str = "differential"
    lambda_strategy: str = "dynamic"
    lambda_fixed: float = 0.5

    def __post_init__(self):
        if self.channels < 1 or self.head_dim < 1 or self.window < 1:
            raise ConfigError(
                f"channels/head_dim/window must be positive, got "
                f"{self.channels}/{self.head_dim}/{self.window}"
            )
        if self.channels % (2 * self.head_dim) != 0:
            raise ConfigError(
                f"channels={self.channels} must be divisible by 2*head_dim={2 * self.head_dim}"
            )
        if self.block_index < 1:
            raise ConfigError(f"block_index must be >= 1, got {self.block_index}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.lambda_strategy not in LAMBDA_STRATEGIES:
            raise ConfigError(f"lambda_strategy must be one of {LAMBDA_STRATEGIES}")
        if not math.isfinite(self.lambda_fixed):
            raise ConfigError(f"lambda_fixed must be finite, got {self.lambda_fixed}")

    @property
    def heads(self) -> int:
        return self.channels // (2 * self.head_dim)

    @property
    def lambda_anchor(self) -> float:
        if self.lambda_strategy == "dynamic":
            return lambda_init(self.block_index)
        return float(self.lambda_fixed)


def summarize_windows(x: Tensor, window: int) -> Tensor:
    """Mean-pool each non-overlapping window x window patch into one token.

    Accepts (H, W, C) or (B, H, W, C); returns (N_win, C) or (B, N_win, C)
    with windows ordered row-major over the window grid. Fully differentiable
    (it is a reshape plus a mean).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise GeometryError(f"expected (B,H,W,C) or (H,W,C), got {x.shape}")
    batch, height, width, channels = x.shape
    if height % window or width % window:
        raise GeometryError(
            f"window must divide the feature map: H={height}, W={width}, window={window}"
        )
    rows, cols = height // window, width // window
    tokens = x.reshape((batch, rows, window, cols, window, channels))
    tokens = tokens.mean(axis=(2, 4))
    tokens = tokens.reshape((batch, rows * cols, channels))
    return tokens.reshape(tokens.shape[1:]) if squeeze else tokens


class DifferentialCrossAttention(Module):
    """Multi-head cross attention with a differential (dual-softmax) score map.

    Projections map channels C to 2*head_dim per head (packed as C -> C);
    queries/keys split into two halves feeding the two softmax maps. Each
    head output is RMS-normalized with a learnable per-head gain and scaled
    by (1 - lambda_anchor) before the C x C output projection.

    With ``attention_kind="standard"`` the same cross-attention geometry runs
    a single softmax with C -> head_dim query/key projections per head, as the
    non-differential baseline.
    """

    def __init__(self, cfg: DcaConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        channels, d, heads = cfg.channels, cfg.head_dim, cfg.heads
        self.lambda_anchor = cfg.lambda_anchor
        if cfg.attention_kind == "differential":
            self.wq = Linear(channels, channels, bias=False, rng=rng)
            self.wk = Linear(channels, channels, bias=False, rng=rng)
            self.lambda_q1 = Parameter(rng.normal(0.0, 0.1, d))
            self.lambda_k1 = Parameter(rng.normal(0.0, 0.1, d))
            self.lambda_q2 = Parameter(rng.normal(0.0, 0.1, d))
            self.lambda_k2 = Parameter(rng.normal(0.0, 0.1, d))
            self.head_gain = Parameter(np.ones((heads, 1, 2 * d)))
        else:
            self.wq = Linear(channels, heads * d, bias=False, rng=rng)
            self.wk = Linear(channels, heads * d, bias=False, rng=rng)
        self.wv = Linear(channels, channels, bias=False, rng=rng)
        self.wo = Linear(channels, channels, bias=False, rng=rng)
        self.capture = False
        self.captured = None

    def lambda_value(self) -> Tensor:
        """Scalar lambda = exp(lq1.lk1) - exp(lq2.lk2) + anchor, one per layer."""
        if self.cfg.attention_kind != "differential":
            raise UsageError("lambda is only defined for differential attention")
        e1 = T.exp((self.lambda_q1 * self.lambda_k1).sum())
        e2 = T.exp((self.lambda_q2 * self.lambda_k2).sum())
        return e1 - e2 + self.lambda_anchor

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape((1,) + x.shape)
        batch, height, width, channels = x.shape
        cfg = self.cfg
        if channels != cfg.channels:
            raise GeometryError(f"expected {cfg.channels} channels, got {channels}")
        n = height * width
        queries = x.reshape((batch, n, channels))
        summaries = summarize_windows(x, cfg.window)
        n_win = summaries.shape[1]
        d, heads = cfg.head_dim, cfg.heads
        scale = 1.0 / math.sqrt(d)

        if cfg.attention_kind == "differential":
            q = self.wq(queries).reshape((batch, n, heads, 2 * d)).transpose((0, 2, 1, 3))
            k = self.wk(summaries).reshape((batch, n_win, heads, 2 * d)).transpose((0, 2, 1, 3))
            v = self.wv(summaries).reshape((batch, n_win, heads, 2 * d)).transpose((0, 2, 1, 3))
            k_t = k.transpose((0, 1, 3, 2))
            s1 = T.softmax_lastdim((q[..., :d] @ k_t[:, :, :d, :]) * scale)
            s2 = T.softmax_lastdim((q[..., d:] @ k_t[:, :, d:, :]) * scale)
            T.assert_finite(s1, "attention softmax S1")
            T.assert_finite(s2, "attention softmax S2")
            lam = self.lambda_value()
            diff = s1 - lam * s2
            head_out = diff @ v
            head_out = T.rmsnorm(head_out) * self.head_gain
            head_out = (1.0 - self.lambda_anchor) * head_out
            if self.capture:
                self.captured = {
                    "s1": s1.data.copy(),
                    "s2": s2.data.copy(),
                    "diff": diff.data.copy(),
                    "lambda": lam.item(),
                }
        else:
            q = self.wq(queries).reshape((batch, n, heads, d)).transpose((0, 2, 1, 3))
            k = self.wk(summaries).reshape((batch, n_win, heads, d)).transpose((0, 2, 1, 3))
            v = self.wv(summaries).reshape((batch, n_win, heads, 2 * d)).transpose((0, 2, 1, 3))
            s1 = T.softmax_lastdim((q @ k.transpose((0, 1, 3, 2))) * scale)
            T.assert_finite(s1, "attention softmax")
            head_out = s1 @ v
            if self.capture:
                self.captured = {"s1": s1.data.copy()}

        merged = head_out.transpose((0, 2, 1, 3)).reshape((batch, n, channels))
        out = self.wo(merged).reshape((batch, height, width, channels))
        return out.reshape(out.shape[1:]) if squeeze else out

    def attention_flops(self, height: int, width: int) -> dict:
        return attention_flops(self.cfg, height, width)


def attention_flops(cfg: DcaConfig, height: int, width: int) -> dict:
    """Multiply-add counts for the score and value stages, plus the ratio a
    hypothetical pixel-wise (N x N) attention would cost relative to this one.

    All counts are exact integers; the score-cost ratio equals window**2
    whenever the window tiles the feature map.
    """
    if height % cfg.window or width % cfg.window:
        raise GeometryError(
            f"window must divide the feature map: H={height}, W={width}, window={cfg.window}"
        )
    n = height * width
    n_win = (height // cfg.window) * (width // cfg.window)
    branches = 2 if cfg.attention_kind == "differential" else 1
    score = branches * cfg.heads * n * n_win * cfg.head_dim
    value = cfg.heads * n * n_win * 2 * cfg.head_dim
    pixelwise_score = branches * cfg.heads * n * n * cfg.head_dim
    return {
        "score_flops": score,
        "value_flops": value,
        "pixelwise_score_flops": pixelwise_score,
        "ratio_vs_pixelwise": pixelwise_score // score,
    }
