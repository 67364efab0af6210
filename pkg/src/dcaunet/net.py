"""The U-shaped segmentation network and its parameter/FLOP accounting.

Encoder: 4x4 patch embedding, then up to four stages of attention blocks with
patch merging between stages (width doubles, resolution halves). Decoder:
mirrored pixel-shuffle upsampling, fusion of each skip with the upsampled map
(channel-spatial fusion or the plain concat+conv baseline), and one attention
block per decoder stage. A final 4x expansion and a per-pixel linear head
produce class logits at input resolution.

Attention block indices count globally in forward order starting at 1
(encoder first, then decoder), which drives the depth-dependent lambda anchor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .blocks import DcaBlock, FinalExpand, PatchEmbed, PatchMerge, Upsample
from .checkpoint import load_checkpoint, save_checkpoint
from .csff import CsffBlock, StandardFusion
from .dca import ATTENTION_KINDS, LAMBDA_STRATEGIES, DcaConfig, attention_flops
from .errors import ConfigError, FileFormatError, GeometryError, ShapeError
from .nn import Linear, Module, ModuleList
from .tensor import Tensor

FUSION_KINDS = ("csff", "standard")


@dataclass
class NetworkConfig:
    input_size: int = 224
    in_channels: int = 1
    num_classes: int = 9
    base_width: int = 32
    stage_depths: tuple = (2, 2, 2, 2)
    head_dim: int = 16
    window: int = 7
    attention_kind: str = "differential"
    lambda_strategy: str = "dynamic"
    lambda_fixed: float = 0.5
    fusion: str = "csff"
    use_channel_attn: bool = True
    use_spatial_attn: bool = True

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if self.input_size < 4 or self.input_size % 4 != 0:
            raise GeometryError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 1 <= len(self.stage_depths) <= 4 or any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be 1-4 positive ints, got {self.stage_depths}")
        if self.base_width % (2 * self.head_dim) != 0:
            raise ConfigError(
                f"base_width={self.base_width} must be divisible by 2*head_dim={2 * self.head_dim}"
            )
        if self.base_width % 4 != 0:
            raise ConfigError(f"base_width={self.base_width} must be divisible by 4 for fusion")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.lambda_strategy not in LAMBDA_STRATEGIES:
            raise ConfigError(f"lambda_strategy must be one of {LAMBDA_STRATEGIES}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}")
        for stage, grid in enumerate(self.stage_grids()):
            window = self.effective_window(stage)
            if grid % window != 0:
                raise GeometryError(
                    f"stage {stage + 1} grid {grid} is not divisible by its window "
                    f"{window} (configured window {self.window}); pick a window that "
                    f"divides every stage grid"
                )

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    def stage_width(self, stage: int) -> int:
        return self.base_width << stage

    def stage_grids(self) -> list:
        grids = []
        grid = self.input_size // 4
        for _ in range(self.num_stages):
            grids.append(grid)
            grid = (grid + 1) // 2  # odd grids are padded before merging
        return grids

    def effective_window(self, stage: int) -> int:
        """Window used at a stage; clamped to the grid so the deepest stage may
        collapse to a single global summary token."""
        return min(self.window, self.stage_grids()[stage])

    def to_dict(self) -> dict:
        data = asdict(self)
        data["stage_depths"] = list(self.stage_depths)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**known)


class DCAUNet(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        stages = cfg.num_stages
        widths = [cfg.stage_width(i) for i in range(stages)]
        grids = cfg.stage_grids()

        self.patch_embed = PatchEmbed(cfg.in_channels, widths[0], rng)
        block_index = 1
        enc_stages = []
        merges = []
        for i in range(stages):
            blocks = []
            for _ in range(cfg.stage_depths[i]):
                blocks.append(DcaBlock(self._dca_cfg(i, block_index), rng))
                block_index += 1
            enc_stages.append(ModuleList(blocks))
            if i < stages - 1:
                merges.append(PatchMerge(widths[i], rng))
        self.enc_stages = ModuleList(enc_stages)
        self.merges = ModuleList(merges)

        ups = []
        fusions = []
        dec_blocks = []
        for i in range(stages - 2, -1, -1):
            ups.append(Upsample(widths[i + 1], rng))
            if cfg.fusion == "csff":
                fusions.append(CsffBlock(widths[i], rng,
                                         use_channel_attn=cfg.use_channel_attn,
                                         use_spatial_attn=cfg.use_spatial_attn))
            else:
                fusions.append(StandardFusion(widths[i], rng))
            dec_blocks.append(DcaBlock(self._dca_cfg(i, block_index), rng))
            block_index += 1
        self.ups = ModuleList(ups)
        self.fusions = ModuleList(fusions)
        self.dec_blocks = ModuleList(dec_blocks)

        self.final_expand = FinalExpand(widths[0], rng)
        self.head = Linear(widths[0], cfg.num_classes, rng=rng)
        self.num_blocks = block_index - 1
        self._grids = grids

    def _dca_cfg(self, stage: int, block_index: int) -> DcaConfig:
        cfg = self.cfg
        return DcaConfig(
            channels=cfg.stage_width(stage),
            head_dim=cfg.head_dim,
            window=cfg.effective_window(stage),
            block_index=block_index,
            attention_kind=cfg.attention_kind,
            lambda_strategy=cfg.lambda_strategy,
            lambda_fixed=cfg.lambda_fixed,
        )

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape((1,) + x.shape)
        if x.shape[1] != self.cfg.input_size or x.shape[2] != self.cfg.input_size:
            raise ShapeError(
                f"input spatial extents {x.shape[1:3]} != configured {self.cfg.input_size}"
            )
        if x.shape[3] != self.cfg.in_channels:
            raise ShapeError(f"input has {x.shape[3]} channels, expected {self.cfg.in_channels}")

        y = self.patch_embed(x)
        skips = []
        for i, stage in enumerate(self.enc_stages):
            for block in stage:
                y = block(y)
            skips.append(y)
            if i < len(self.merges):
                y = self.merges[i](y)

        for k in range(len(self.ups)):
            y = self.ups[k](y)
            skip = skips[len(skips) - 2 - k]
            if y.shape[1] != skip.shape[1] or y.shape[2] != skip.shape[2]:
                # merge may have zero-padded an odd grid; crop back to the skip
                y = y[:, :skip.shape[1], :skip.shape[2], :]
            y = self.fusions[k](skip, y)
            y = self.dec_blocks[k](y)

        y = self.final_expand(y)
        logits = self.head(y)
        return logits.reshape(logits.shape[1:]) if squeeze else logits

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            arrays[name] = buf
        return arrays

    def load_state(self, arrays: dict) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise FileFormatError(f"state mismatch: missing={missing[:3]} extra={extra[:3]}")
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in arrays.items():
            if name in params:
                target = params[name]
                if tuple(arr.shape) != target.shape:
                    raise FileFormatError(f"{name}: shape {arr.shape} != {target.shape}")
                target.data = np.asarray(arr, dtype=target.dtype)
            else:
                buf = buffers[name]
                if tuple(arr.shape) != buf.shape:
                    raise FileFormatError(f"{name}: shape {arr.shape} != {buf.shape}")
                buf[...] = np.asarray(arr, dtype=buf.dtype)

    def save(self, path) -> None:
        save_checkpoint(path, {"network": self.cfg.to_dict(), "seed": self.seed},
                        self.state_arrays())

    @classmethod
    def load(cls, path) -> "DCAUNet":
        config, arrays = load_checkpoint(path)
        net = cls(NetworkConfig.from_dict(config["network"]), seed=int(config.get("seed", 0)))
        net.load_state(arrays)
        return net

    # -- accounting -----------------------------------------------------------

    def summarize(self) -> dict:
        """Exact parameter counts and multiply-add FLOPs per forward of one image.

        Only convolutions, matmuls, and attention products are counted, each
        multiply-add as one FLOP.
        """
        cfg = self.cfg
        grids = self._grids
        rows = []

        def conv_flops(grid_out, kernel, cin_per_group, cout):
            return grid_out * grid_out * kernel * kernel * cin_per_group * cout

        def block_flops(stage):
            grid, width = grids[stage], cfg.stage_width(stage)
            n = grid * grid
            att = attention_flops(self._dca_cfg(stage, 1), grid, grid)
            if cfg.attention_kind == "differential":
                proj = n * width * width * 2  # wq + wo
                proj += 2 * att_tokens(stage) * width * width  # wk + wv on summaries
            else:
                proj = n * width * (width // 2) + att_tokens(stage) * width * (width // 2)
                proj += att_tokens(stage) * width * width + n * width * width
            dw = conv_flops(grid, 3, 1, width)
            mlp = 2 * n * width * 4 * width
            return dw + proj + att["score_flops"] + att["value_flops"] + mlp

        def att_tokens(stage):
            grid = grids[stage]
            eff = cfg.effective_window(stage)
            return (grid // eff) ** 2

        embed_grid = cfg.input_size // 4
        rows.append(("patch_embed", self.patch_embed.num_params(),
                     conv_flops(embed_grid, 4, cfg.in_channels, cfg.base_width)))
        for i, stage in enumerate(self.enc_stages):
            rows.append((f"encoder_stage{i + 1}", stage.num_params(),
                         cfg.stage_depths[i] * block_flops(i)))
            if i < len(self.merges):
                out_grid = grids[i + 1]
                rows.append((f"merge{i + 1}", self.merges[i].num_params(),
                             out_grid * out_grid * 4 * cfg.stage_width(i) * 2 * cfg.stage_width(i)))
        for k in range(len(self.ups)):
            stage = cfg.num_stages - 2 - k
            grid, width = grids[stage], cfg.stage_width(stage)
            up_tokens = grids[stage + 1] ** 2
            flops = up_tokens * cfg.stage_width(stage + 1) * 2 * cfg.stage_width(stage + 1)
            if cfg.fusion == "csff":
                flops += 2 * conv_flops(grid, 3, width, width)
                flops += conv_flops(grid, 3, 2 * width, width)
                if cfg.use_channel_attn:
                    flops += width * width  # shared bottleneck MLP on avg+max vectors
                if cfg.use_spatial_attn:
                    flops += conv_flops(grid, 3, 2, 1)
            else:
                flops += conv_flops(grid, 3, 2 * width, width)
            flops += block_flops(stage)
            params = (self.ups[k].num_params() + self.fusions[k].num_params()
                      + self.dec_blocks[k].num_params())
            rows.append((f"decoder_stage{stage + 1}", params, flops))
        head_tokens = embed_grid * embed_grid
        head_flops = head_tokens * cfg.base_width * 16 * cfg.base_width
        head_flops += cfg.input_size * cfg.input_size * cfg.base_width * cfg.num_classes
        rows.append(("head", self.final_expand.num_params() + self.head.num_params(),
                     head_flops))

        total_params = self.num_params()
        total_flops = sum(r[2] for r in rows)
        return {
            "param_count": total_params,
            "flops_per_forward": total_flops,
            "per_module": rows,
        }
