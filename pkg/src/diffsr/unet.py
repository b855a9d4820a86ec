"""Noise-prediction UNet with step embedding and cross-attention hooks.

Residual blocks use group normalization and SiLU; each residual branch is
scaled by a learnable per-channel gain (the layer-scale initializer from the
training configuration). Cross-attention onto LR tokens is inserted at the
configured levels, and a bottleneck fusion slot modulates the deepest
feature map with the variational conditioning map when one is supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditionBundle, CrossAttention, FeatureFusion


def sinusoidal_step_embedding(steps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos embedding of (1-based) step indices; bounded in [-1, 1]."""
    if dim < 2:
        raise ValueError("embedding dim must be >= 2")
    steps = torch.as_tensor(steps, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = steps[:, None] * freqs[None, :]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    out_channels: int = 3
    inner_channel: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    res_blocks_per_level: int = 2
    dropout_rate: float = 0.0
    attention_levels: tuple[int, ...] = (1, 2)
    num_heads: int = 4
    token_dim: int = 64
    layer_scale: float = 1e-6
    with_fusion: bool = True

    def __post_init__(self):
        if self.inner_channel < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout_rate}")
        levels = len(self.channel_multipliers)
        if any(not 0 <= l < levels for l in self.attention_levels):
            raise ValueError(f"attention_levels {self.attention_levels} outside valid levels [0, {levels})")
        for l in self.attention_levels:
            width = self.inner_channel * self.channel_multipliers[l]
            if width % self.num_heads:
                raise ValueError(f"level {l} width {width} not divisible by num_heads {self.num_heads}")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def bottleneck_channels(self) -> int:
        return self.inner_channel * self.channel_multipliers[-1]


def _gn(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    """GroupNorm/SiLU residual block with step-embedding bias and gated branch."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float, layer_scale: float):
        super().__init__()
        self.norm1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _gn(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.gain = nn.Parameter(torch.full((out_ch,), float(layer_scale)))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + self.gain[None, :, None, None] * h


class TokenAttentionBlock(nn.Module):
    """Pre-normed cross-attention residual insertion onto LR tokens."""

    def __init__(self, channels: int, token_dim: int, num_heads: int):
        super().__init__()
        self.norm = _gn(channels)
        self.attn = CrossAttention(query_dim=channels, token_dim=token_dim, num_heads=num_heads)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor | None) -> torch.Tensor:
        if tokens is None:
            return x
        return x + self.attn(self.norm(x), tokens)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserUNet(nn.Module):
    """Predicts the per-step noise from the noisy image, step, and condition."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.inner_channel
        emb_dim = ch * 4
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)

        attn_at = set(cfg.attention_levels)
        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chs = [ch]
        cur = ch
        for level, mult in enumerate(cfg.channel_multipliers):
            out_ch = cfg.inner_channel * mult
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level):
                blocks.append(ResBlock(cur, out_ch, emb_dim, cfg.dropout_rate, cfg.layer_scale))
                attns.append(
                    TokenAttentionBlock(out_ch, cfg.token_dim, cfg.num_heads)
                    if level in attn_at else nn.Identity()
                )
                cur = out_ch
                skip_chs.append(cur)
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            if level != cfg.levels - 1:
                self.downsamples.append(Downsample(cur))
                skip_chs.append(cur)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResBlock(cur, cur, emb_dim, cfg.dropout_rate, cfg.layer_scale)
        self.mid_attn = (
            TokenAttentionBlock(cur, cfg.token_dim, cfg.num_heads)
            if (cfg.levels - 1) in attn_at else nn.Identity()
        )
        self.mid_block2 = ResBlock(cur, cur, emb_dim, cfg.dropout_rate, cfg.layer_scale)
        self.fusion = FeatureFusion(cur) if cfg.with_fusion else None

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            out_ch = cfg.inner_channel * cfg.channel_multipliers[level]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level + 1):
                blocks.append(ResBlock(cur + skip_chs.pop(), out_ch, emb_dim, cfg.dropout_rate, cfg.layer_scale))
                attns.append(
                    TokenAttentionBlock(out_ch, cfg.token_dim, cfg.num_heads)
                    if level in attn_at else nn.Identity()
                )
                cur = out_ch
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            self.upsamples.append(Upsample(cur) if level != 0 else nn.Identity())

        self.norm_out = _gn(cur)
        self.conv_out = nn.Conv2d(cur, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _embed(self, step, batch: int, device, dtype) -> torch.Tensor:
        s = torch.as_tensor(step, device=device)
        if s.dim() == 0:
            s = s.expand(batch)
        emb = sinusoidal_step_embedding(s, self.cfg.inner_channel * 4).to(device=device, dtype=dtype)
        return self.time_mlp(emb)

    def _encode(self, x, emb, tokens):
        hs = [self.conv_in(x)]
        h = hs[-1]
        for level in range(self.cfg.levels):
            for block, attn in zip(self.down_blocks[level], self.down_attns[level]):
                h = block(h, emb)
                h = attn(h, tokens) if isinstance(attn, TokenAttentionBlock) else h
                hs.append(h)
            if level != self.cfg.levels - 1:
                h = self.downsamples[level](h)
                hs.append(h)
        h = self.mid_block1(h, emb)
        if isinstance(self.mid_attn, TokenAttentionBlock):
            h = self.mid_attn(h, tokens)
        h = self.mid_block2(h, emb)
        return h, hs

    def encoder_features(self, x: torch.Tensor, step, cond: ConditionBundle | None = None) -> torch.Tensor:
        """Bottleneck feature map at the deepest level, pre-fusion."""
        emb = self._embed(step, x.shape[0], x.device, x.dtype)
        tokens = cond.lr_tokens if cond is not None else None
        h, _ = self._encode(x, emb, tokens)
        return h

    def forward(self, x: torch.Tensor, step, cond: ConditionBundle | None = None) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        side = 2 ** (self.cfg.levels - 1)
        if x.shape[2] % side or x.shape[3] % side:
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {side}")
        emb = self._embed(step, x.shape[0], x.device, x.dtype)
        tokens = cond.lr_tokens if cond is not None else None

        h, hs = self._encode(x, emb, tokens)

        if cond is not None and cond.cond_map is not None:
            if self.fusion is None:
                raise ValueError("conditioning map supplied but fusion heads were not built")
            cond.fused_mean, cond.fused_scale, cond.fused = self.fusion(cond.cond_map, h)
            h = cond.fused
        elif cond is not None:
            cond.fused = h

        for i, level in enumerate(reversed(range(self.cfg.levels))):
            for block, attn in zip(self.up_blocks[i], self.up_attns[i]):
                h = block(torch.cat([h, hs.pop()], dim=1), emb)
                h = attn(h, tokens) if isinstance(attn, TokenAttentionBlock) else h
            if level != 0:
                h = self.upsamples[i](h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def predict_eps(self, x: torch.Tensor, step, cond: ConditionBundle | None = None) -> torch.Tensor:
        return self(x, step, cond)
