"""The TransClaw U-Net: a convolutional encoder, a patch-embedded transformer
bottleneck, an independent bottom-upsampling path, and a claw decoder that
fuses resampled encoder features, the same-level up-path feature, and all
deeper decoder outputs at every resolution level.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict

import numpy as np

from . import ops
from .errors import ConfigError
from .module import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor, concat, reshape, scalar_mul, transpose

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; see README for the serialized key list."""

    height: int = 64
    width: int = 64
    in_channels: int = 1
    num_classes: int = 4
    conv_levels: int = 3
    base_channels: int = 16
    patch_size: int = 1          # patches on the deepest feature map
    transformer_layers: int = 4
    heads: int = 4
    d_model: int = 64
    d_mlp: int = 128
    skip_budget: int = 3
    upsample_mode: str = "bilinear"
    use_pos_embed: bool = True
    include_same_level_encoder: bool = False

    def validate(self) -> "ModelConfig":
        div = (2 ** self.conv_levels) * self.patch_size
        if self.height % div or self.width % div:
            raise ConfigError(
                f"input extents {self.height}x{self.width} must be divisible by "
                f"2^conv_levels * patch_size = {div}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0 <= self.skip_budget <= self.conv_levels:
            raise ConfigError(f"skip_budget {self.skip_budget} outside 0..{self.conv_levels}")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if min(self.height, self.width, self.in_channels, self.num_classes,
               self.conv_levels, self.base_channels, self.patch_size,
               self.heads, self.d_model, self.d_mlp) < 1:
            raise ConfigError("all extents and counts must be positive")
        if self.transformer_layers < 0:
            raise ConfigError("transformer_layers must be >= 0")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size {self.patch_size} must be a power of two")
        return self

    @property
    def effective_patch(self) -> int:
        """Patch extent measured on the original image."""
        return self.patch_size * 2 ** self.conv_levels

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.height // self.effective_patch, self.width // self.effective_patch

    @property
    def num_tokens(self) -> int:
        gh, gw = self.token_grid
        return gh * gw

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.level_channels(self.conv_levels)

    def to_dict(self) -> dict:
        doc = {"version": CONFIG_VERSION}
        doc.update(asdict(self))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        version = doc.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version!r} not supported "
                              f"(expected {CONFIG_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = known - set(doc)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**doc).validate()


class ConvUnit(Module):
    """One conv3x3 (pad 1) -> batch norm -> ReLU unit."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class ConvBlock(Module):
    """Two successive conv-norm-ReLU units at a fixed channel width."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.unit1 = ConvUnit(in_ch, out_ch, rng)
        self.unit2 = ConvUnit(out_ch, out_ch, rng)

    def forward(self, x):
        return self.unit2(self.unit1(x))


class Encoder(Module):
    """Per level: conv block, record the pre-pool skip, then 2x max pool."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.blocks = []
        in_ch = cfg.in_channels
        for level in range(1, cfg.conv_levels + 1):
            out_ch = cfg.level_channels(level)
            self.blocks.append(ConvBlock(in_ch, out_ch, rng))
            in_ch = out_ch

    def forward(self, x):
        skips = {}
        for level, block in enumerate(self.blocks, start=1):
            x = block(x)
            skips[level] = x
            x = ops.maxpool2d(x)
        return skips, x


class PatchEmbed(Module):
    """Flatten non-overlapping patches of the deepest feature map, project
    them to tokens, and add a learned position embedding."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.patch = cfg.patch_size
        self.use_pos = cfg.use_pos_embed
        patch_dim = cfg.patch_size ** 2 * cfg.bottleneck_channels
        self.proj = Linear(patch_dim, cfg.d_model, rng)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.d_model)), requires_grad=True)

    def forward(self, f):
        B, C, H, W = f.shape
        p = self.patch
        if H % p or W % p:
            raise ConfigError(f"feature extents {H}x{W} not divisible by patch size {p}")
        gh, gw = H // p, W // p
        x = reshape(f, (B, C, gh, p, gw, p))
        x = transpose(x, (0, 2, 4, 3, 5, 1))        # (B, gh, gw, p, p, C)
        x = reshape(x, (B, gh * gw, p * p * C))     # row-major token order
        tokens = self.proj(x)
        if self.use_pos:
            tokens = ops.bias_add(tokens, self.pos_embed)
        return tokens


class MultiHeadAttention(Module):
    """Scaled dot-product attention over head-split projections (no biases);
    heads are concatenated and re-projected."""

    def __init__(self, d_model: int, heads: int, rng):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(d_model, d_model, rng, bias=False)
        self.wk = Linear(d_model, d_model, rng, bias=False)
        self.wv = Linear(d_model, d_model, rng, bias=False)
        self.wo = Linear(d_model, d_model, rng, bias=False)
        self.last_attn: np.ndarray | None = None  # (B, heads, n, n), detached

    def _split(self, t, B, n):
        t = reshape(t, (B, n, self.heads, self.d_head))
        return transpose(t, (0, 2, 1, 3))

    def forward(self, z):
        B, n, d = z.shape
        q = self._split(self.wq(z), B, n)
        k = self._split(self.wk(z), B, n)
        v = self._split(self.wv(z), B, n)
        scores = scalar_mul(q @ transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(self.d_head))
        attn = ops.softmax(scores)
        self.last_attn = attn.data.copy()
        ctx = attn @ v
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, n, d))
        return self.wo(ctx)


class TransformerBlock(Module):
    """Pre-norm residual block: attention sub-layer then MLP sub-layer."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.fc1 = Linear(cfg.d_model, cfg.d_mlp, rng)
        self.fc2 = Linear(cfg.d_mlp, cfg.d_model, rng)

    def forward(self, z):
        z = self.attn(self.norm1(z)) + z
        return self.fc2(ops.gelu(self.fc1(self.norm2(z)))) + z


class Bottleneck(Module):
    """Patch embedding, the transformer stack, and restoration to a feature
    grid at the token resolution."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.grid = cfg.token_grid
        self.patch = PatchEmbed(cfg, rng)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.transformer_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.to_grid = Conv2d(cfg.d_model, cfg.bottleneck_channels, 3, rng, padding=1)

    def encode_tokens(self, f):
        tokens = self.patch(f)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def forward(self, f):
        tokens = self.final_norm(self.encode_tokens(f))
        B = f.shape[0]
        gh, gw = self.grid
        grid = transpose(reshape(tokens, (B, gh, gw, tokens.shape[-1])), (0, 3, 1, 2))
        return self.to_grid(grid)


class UpStage(Module):
    """One bottom-upsampling step: a 3x3 conv unit, then 2x upsampling."""

    def __init__(self, in_ch: int, out_ch: int, mode: str, rng):
        super().__init__()
        self.unit = ConvUnit(in_ch, out_ch, rng)
        self.mode = mode

    def forward(self, x):
        return ops.upsample2x(self.unit(x), self.mode)


class UpPath(Module):
    """Independent chain from the bottleneck; records one output per conv
    level at that level's pre-pool extent."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c_b = cfg.bottleneck_channels
        mode = cfg.upsample_mode
        self.pre_stages = [UpStage(c_b, c_b, mode, rng)
                           for _ in range(_log2(cfg.patch_size))]
        self.stages = {}
        in_ch = c_b
        for level in range(cfg.conv_levels, 0, -1):
            out_ch = cfg.level_channels(level)
            self.stages[str(level)] = UpStage(in_ch, out_ch, mode, rng)
            in_ch = out_ch

    def forward(self, bottleneck):
        x = bottleneck
        for stage in self.pre_stages:
            x = stage(x)
        outputs = {}
        for key, stage in self.stages.items():
            x = stage(x)
            outputs[int(key)] = x
        return outputs


def _log2(n: int) -> int:
    return int(n).bit_length() - 1


def _resample_to(t, target_hw: tuple[int, int], mode: str):
    """Bring a feature map to the target extent by power-of-two average
    pooling (down) or repeated 2x upsampling (up)."""
    H, W = t.shape[2], t.shape[3]
    th, tw = target_hw
    if (H, W) == (th, tw):
        return t
    if H > th:
        if H % th or W % tw or (H // th) != (W // tw):
            raise ConfigError(f"cannot downsample {H}x{W} to {th}x{tw}")
        return ops.avgpool2d(t, H // th)
    if th % H or tw % W or (th // H) != (tw // W):
        raise ConfigError(f"cannot upsample {H}x{W} to {th}x{tw}")
    factor = th // H
    if factor & (factor - 1):
        raise ConfigError(f"upsample factor {factor} is not a power of two")
    for _ in range(_log2(factor)):
        t = ops.upsample2x(t, mode)
    return t


def _split_widths(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if j < rem else 0) for j in range(parts)]


class ClawLevel(Module):
    """Decoder fusion at one level: every enabled source is resampled to the
    level extent, passed through its own channel-reducing 3x3 conv, then the
    concatenation is fused by a conv block at the level width."""

    def __init__(self, cfg: ModelConfig, level: int, rng):
        super().__init__()
        self.level = level
        self.cfg = cfg
        n = cfg.conv_levels + 1
        self.skips_enabled = level > cfg.conv_levels - cfg.skip_budget
        width = cfg.level_channels(level)

        source_channels = {}
        if self.skips_enabled:
            last_enc = level if cfg.include_same_level_encoder else level - 1
            for k in range(1, last_enc + 1):
                source_channels[f"en{k}"] = cfg.level_channels(k)
            source_channels["up"] = cfg.level_channels(level)
        for k in range(level + 1, n + 1):
            in_ch = cfg.bottleneck_channels if k == n else cfg.level_channels(k)
            source_channels[f"de{k}"] = in_ch

        self.source_names = list(source_channels)
        widths = _split_widths(width, len(self.source_names))
        self.reducers = {
            name: Conv2d(source_channels[name], w, 3, rng, padding=1)
            for name, w in zip(self.source_names, widths)
        }
        self.fuse = ConvBlock(width, width, rng)

    def forward(self, skips, ups, decoded):
        cfg = self.cfg
        target = (cfg.height >> (self.level - 1), cfg.width >> (self.level - 1))
        pieces = []
        for name in self.source_names:
            if name.startswith("en"):
                src = skips[int(name[2:])]
            elif name == "up":
                src = ups[self.level]
            else:
                src = decoded[int(name[2:])]
            src = _resample_to(src, target, cfg.upsample_mode)
            pieces.append(self.reducers[name](src))
        return self.fuse(concat(pieces, axis=1))


class TransClawUNet(Module):
    """Full network: encode, transform the bottleneck, run the bottom
    upsampling path, then claw-decode from the deepest level back to full
    resolution logits."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng)
        self.bottleneck = Bottleneck(config, rng)
        self.up_path = UpPath(config, rng)
        self.decoder = {
            str(level): ClawLevel(config, level, rng)
            for level in range(config.conv_levels, 0, -1)
        }
        self.head = Conv2d(config.base_channels, config.num_classes, 1, rng)

    def forward(self, x):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ConfigError(f"input shape {x.shape} does not match configured "
                              f"(B, {cfg.in_channels}, {cfg.height}, {cfg.width})")
        skips, deepest = self.encoder(x)
        bottleneck = self.bottleneck(deepest)
        ups = self.up_path(bottleneck)
        decoded = {cfg.conv_levels + 1: bottleneck}  # deepest decoder level is the bottleneck itself
        for level in range(cfg.conv_levels, 0, -1):
            decoded[level] = self.decoder[str(level)](skips, ups, decoded)
        return self.head(decoded[1])

    def attention_maps(self) -> list[np.ndarray]:
        """Per-layer attention weights recorded during the last forward."""
        return [blk.attn.last_attn for blk in self.bottleneck.blocks
                if blk.attn.last_attn is not None]
