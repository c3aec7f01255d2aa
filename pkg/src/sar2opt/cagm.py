"""Denoising U-Net built from class-angle guidance modules (CAGM).

Each CAGM is ConvBlock -> EmbedBlock -> ConvBlock with a residual path,
followed by an optional self-attention block. The EmbedBlock adds the
timestep embedding, then applies class FiLM and angle FiLM in that order.
The SAR condition image is concatenated onto the noisy optical input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


# --------------------------------------------------------------------------- conditions

@dataclass
class ConditionSet:
    """Batched condition triple. NULL entries: class_id == -1, angle_deg NaN, sar_null True.

    Any field left as None means "NULL for the whole batch".
    """

    batch_size: int
    sar_image: Tensor | None = None  # (B, 1, H, W) in [-1, 1]
    class_id: Tensor | None = None   # (B,) long
    angle_deg: Tensor | None = None  # (B,) float
    sar_null: Tensor | None = None   # (B,) bool

    def __post_init__(self):
        if self.angle_deg is not None:
            self.angle_deg = torch.remainder(self.angle_deg.to(torch.get_default_dtype()), 360.0)

    @classmethod
    def make(cls, sar_image: Tensor | None, class_id, angle_deg) -> "ConditionSet":
        b = None
        for v in (sar_image, class_id, angle_deg):
            if v is not None:
                b = len(v) if not isinstance(v, (int, float)) else 1
                break
        if b is None:
            raise ValueError("cannot infer batch size from an all-NULL condition; use ConditionSet.empty")
        if class_id is not None:
            class_id = torch.as_tensor(class_id, dtype=torch.long).reshape(b)
        if angle_deg is not None:
            angle_deg = torch.as_tensor(angle_deg, dtype=torch.get_default_dtype()).reshape(b)
        return cls(b, sar_image, class_id, angle_deg)

    @classmethod
    def empty(cls, batch_size: int) -> "ConditionSet":
        return cls(batch_size)

    def null(self) -> "ConditionSet":
        return ConditionSet(self.batch_size)

    def drop(self, mask: Tensor) -> "ConditionSet":
        """Jointly replace (SAR, class, angle) with NULL where ``mask`` is True."""
        mask = mask.bool()
        cid = self.class_id.masked_fill(mask, -1) if self.class_id is not None else None
        ang = self.angle_deg.masked_fill(mask, float("nan")) if self.angle_deg is not None else None
        sn = mask if self.sar_null is None else (self.sar_null | mask)
        return ConditionSet(self.batch_size, self.sar_image, cid, ang, sn)


# --------------------------------------------------------------------------- config

@dataclass
class CAGMConfig:
    image_channels: int = 3
    cond_channels: int = 1
    num_classes: int = 6
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (2,)
    groups: int = 8
    embed_dim: int = 128
    use_class_angle: bool = True

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)
        if self.base_channels % self.groups:
            raise ValueError("base_channels must be divisible by groups")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        for lvl in self.attention_levels:
            if not 0 <= lvl < len(self.channel_multipliers):
                raise ValueError(f"attention level {lvl} out of range")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- primitives

def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine modulation. gamma/beta: (C,) or (B, C)."""
    c = x.shape[1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ValueError(f"FiLM parameters of width {gamma.shape[-1]}/{beta.shape[-1]} for {c} channels")
    if gamma.ndim == 1:
        gamma, beta = gamma[None], beta[None]
    return gamma[:, :, None, None] * x + beta[:, :, None, None]


def timestep_features(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype())


class ConvBlock(nn.Module):
    """GroupNorm -> Swish -> 3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, zero_init: bool = False):
        super().__init__()
        if in_ch % groups:
            raise ValueError(f"{in_ch} channels not divisible into {groups} groups")
        self.norm = nn.GroupNorm(groups, in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.silu(self.norm(x)))


class AttentionBlock(nn.Module):
    """Single-head self-attention over spatial positions with a residual add."""

    def __init__(self, channels: int, groups: int, zero_init: bool = True):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)
        self.last_weights: Tensor | None = None
        self.keep_weights = False

    def attention_weights(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        return attn, v

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        attn, v = self.attention_weights(x)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class EmbedBlock(nn.Module):
    """Timestep add, then class FiLM, then angle FiLM.

    FiLM scales are parameterised as 1 + Linear(emb) with zero-initialised
    heads so the block starts as the identity.
    """

    def __init__(self, channels: int, embed_dim: int, use_class_angle: bool = True):
        super().__init__()
        self.use_class_angle = use_class_angle
        self.t_proj = nn.Linear(embed_dim, channels)
        heads = [self.t_proj]
        if use_class_angle:
            self.class_film = nn.Linear(embed_dim, 2 * channels)
            self.angle_film = nn.Linear(embed_dim, 2 * channels)
            heads += [self.class_film, self.angle_film]
        for lin in heads:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, emb: "ConditionEmbedding") -> Tensor:
        x = x + self.t_proj(emb.t_emb)[:, :, None, None]
        if not self.use_class_angle:
            return x
        g, b = self.class_film(emb.class_emb).chunk(2, dim=1)
        x = film(x, 1.0 + g, b)
        g, b = self.angle_film(emb.angle_emb).chunk(2, dim=1)
        return film(x, 1.0 + g, b)


class CAGM(nn.Module):
    """y = Attn(x + Conv(Embed(Conv(x)))), with a 1x1 projection when channels change."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int, groups: int,
                 attention: bool, use_class_angle: bool = True):
        super().__init__()
        self.conv1 = ConvBlock(in_ch, out_ch, groups)
        self.embed = EmbedBlock(out_ch, embed_dim, use_class_angle)
        self.conv2 = ConvBlock(out_ch, out_ch, groups, zero_init=True)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.attn = AttentionBlock(out_ch, groups) if attention else None

    def forward(self, x: Tensor, emb: "ConditionEmbedding") -> Tensor:
        h = self.conv2(self.embed(self.conv1(x), emb))
        y = self.skip(x) + h
        return self.attn(y) if self.attn is not None else y


# --------------------------------------------------------------------------- embeddings

@dataclass
class ConditionEmbedding:
    t_emb: Tensor
    class_emb: Tensor
    angle_emb: Tensor


class AngleEncoder(nn.Module):
    def __init__(self, embed_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim))
        self.null = nn.Parameter(torch.randn(embed_dim) * 0.5)

    def forward(self, angle_deg: Tensor | None, batch_size: int) -> Tensor:
        if angle_deg is None:
            return self.null.expand(batch_size, -1)
        theta = torch.deg2rad(torch.remainder(angle_deg, 360.0))
        is_null = torch.isnan(theta)
        theta = torch.where(is_null, torch.zeros_like(theta), theta)
        feats = torch.stack([torch.sin(theta), torch.cos(theta)], dim=1).to(self.null.dtype)
        emb = self.mlp(feats)
        return torch.where(is_null[:, None], self.null.expand_as(emb), emb)


class ConditionEncoder(nn.Module):
    def __init__(self, num_classes: int, embed_dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.t_mlp = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU(),
                                   nn.Linear(embed_dim, embed_dim))
        self.class_table = nn.Embedding(num_classes + 1, embed_dim)  # last row is NULL
        self.angle = AngleEncoder(embed_dim)

    def encode_angle(self, angle_deg: float | None) -> Tensor:
        if angle_deg is None:
            return self.angle(None, 1)[0]
        return self.angle(torch.tensor([float(angle_deg) % 360.0]), 1)[0]

    def forward(self, t: Tensor, cond: ConditionSet) -> ConditionEmbedding:
        b = cond.batch_size
        t_emb = self.t_mlp(timestep_features(t, self.embed_dim).to(self.class_table.weight.dtype))
        if cond.class_id is None:
            idx = torch.full((b,), self.num_classes, dtype=torch.long)
        else:
            idx = torch.where(cond.class_id < 0, torch.full_like(cond.class_id, self.num_classes),
                              cond.class_id)
        return ConditionEmbedding(t_emb, self.class_table(idx), self.angle(cond.angle_deg, b))


# --------------------------------------------------------------------------- U-Net

class CAGMUNet(nn.Module):
    """Noise predictor eps(x_t, t, sar, class, angle)."""

    def __init__(self, config: CAGMConfig):
        super().__init__()
        self.config = cfg = config
        g, e = cfg.groups, cfg.embed_dim
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.levels = len(chans)
        self.encoder = ConditionEncoder(cfg.num_classes, e)
        # input: noisy image, SAR channel, NULL-flag channel
        self.sar_null_flag = nn.Parameter(torch.ones(()))
        self.in_conv = nn.Conv2d(cfg.image_channels + cfg.cond_channels + 1, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = chans[0]
        for lvl, c in enumerate(chans):
            self.down.append(CAGM(ch, c, e, g, lvl in cfg.attention_levels, cfg.use_class_angle))
            ch = c
            if lvl < self.levels - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = CAGM(ch, ch, e, g, True, cfg.use_class_angle)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(self.levels)):
            c = chans[lvl]
            self.up.append(CAGM(ch + c, c, e, g, lvl in cfg.attention_levels, cfg.use_class_angle))
            ch = c
            if lvl > 0:
                self.upsample.append(nn.Conv2d(c, chans[lvl - 1], 3, padding=1))
                ch = chans[lvl - 1]
        self.out = ConvBlock(ch, cfg.image_channels, g, zero_init=True)

    def cagm_blocks(self) -> list[CAGM]:
        return [*self.down, self.mid, *self.up]

    def _input(self, x_t: Tensor, cond: ConditionSet) -> Tensor:
        b, _, h, w = x_t.shape
        cc = self.config.cond_channels
        if cond.sar_image is None:
            sar = x_t.new_zeros(b, cc, h, w)
            null = torch.ones(b, dtype=torch.bool)
        else:
            sar = cond.sar_image.to(x_t.dtype)
            null = cond.sar_null if cond.sar_null is not None else torch.zeros(b, dtype=torch.bool)
            sar = torch.where(null[:, None, None, None], torch.zeros_like(sar), sar)
        flag = null.to(x_t.dtype)[:, None, None, None] * self.sar_null_flag
        return torch.cat([x_t, sar, flag.expand(b, 1, h, w)], dim=1)

    def forward(self, x_t: Tensor, t: Tensor | int, cond: ConditionSet) -> Tensor:
        b, _, h, w = x_t.shape
        k = 2 ** (self.levels - 1)
        if h % k or w % k:
            raise ValueError(f"spatial size {h}x{w} not divisible by {k}")
        if cond.batch_size != b:
            raise ValueError(f"condition batch {cond.batch_size} != input batch {b}")
        if not isinstance(t, Tensor):
            t = torch.full((b,), int(t), dtype=torch.long)
        emb = self.encoder(t, cond)
        x = self.in_conv(self._input(x_t, cond))
        skips = []
        for lvl, block in enumerate(self.down):
            x = block(x, emb)
            skips.append(x)
            if lvl < self.levels - 1:
                x = self.downsample[lvl](x)
        x = self.mid(x, emb)
        for i, block in enumerate(self.up):
            x = block(torch.cat([x, skips.pop()], dim=1), emb)
            if i < self.levels - 1:
                x = self.upsample[i](F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.out(x)
