"""Conditioning pathways for the denoiser.

Two mechanisms are provided: a low-resolution token encoder whose output
feeds multi-head cross-attention inside the denoising UNet, and a
variational branch that encodes the current observation into a Gaussian
latent, decodes it into a spatial conditioning map, and modulates the UNet
bottleneck with it.

At inference the variational encoder is never run; the latent is drawn from
a standard normal and only the decoder/fusion half participates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ConditionBundle:
    """Encoder outputs attached to one denoising step.

    ``lr_tokens`` come from the LR encoder (keys/values for cross-attention);
    ``latent`` is the per-element Gaussian latent; ``cond_map`` the decoded
    spatial conditioning feature. ``fused_mean``/``fused_scale``/``fused``
    are filled by the bottleneck fusion during the UNet forward pass.
    """

    lr_tokens: torch.Tensor | None = None
    latent: torch.Tensor | None = None
    cond_map: torch.Tensor | None = None
    fused_mean: torch.Tensor | None = None
    fused_scale: torch.Tensor | None = None
    fused: torch.Tensor | None = None


@dataclass(frozen=True)
class GaussianParams:
    """Mean and strictly positive std of a diagonal Gaussian."""

    mean: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if not bool(torch.isfinite(self.mean).all()):
            raise ValueError("Gaussian mean must be finite")
        if bool((self.sigma <= 0).any()):
            raise ValueError("Gaussian sigma must be strictly positive")


class LRTokenEncoder(nn.Module):
    """Projects an LR image to a token matrix matching the attention width.

    Spatial resolution is preserved, so the token count equals H*W of the
    input; each token is a `dim`-wide feature column.
    """

    def __init__(self, in_channels: int = 3, dim: int = 64, hidden: int = 32):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, dim, 1),
        )

    def forward(self, x_lr: torch.Tensor) -> torch.Tensor:
        feat = self.net(x_lr)
        b, d, h, w = feat.shape
        return feat.reshape(b, d, h * w).transpose(1, 2)  # [B, tokens, dim]


def tokens_to_map(tokens: torch.Tensor, grid_hw: tuple[int, int],
                  out_hw: tuple[int, int] | None = None) -> torch.Tensor:
    """Fold a token matrix back onto its spatial grid, optionally resized."""
    b, n, d = tokens.shape
    h, w = grid_hw
    if h * w != n:
        raise ValueError(f"token count {n} does not match grid {grid_hw}")
    fmap = tokens.transpose(1, 2).reshape(b, d, h, w)
    if out_hw is not None and out_hw != (h, w):
        fmap = F.interpolate(fmap, size=out_hw, mode="nearest")
    return fmap


class CrossAttention(nn.Module):
    """Multi-head attention from a spatial query map onto LR tokens.

    Queries come from the (flattened) feature map, keys and values from the
    token matrix, each through their own learned projection.
    """

    def __init__(self, query_dim: int, token_dim: int, num_heads: int = 1):
        super().__init__()
        if query_dim % num_heads != 0:
            raise ValueError(f"query_dim {query_dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = query_dim // num_heads
        self.to_q = nn.Linear(query_dim, query_dim)
        self.to_k = nn.Linear(token_dim, query_dim)
        self.to_v = nn.Linear(token_dim, query_dim)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(
        self,
        q_feat: torch.Tensor,
        lr_tokens: torch.Tensor,
        return_weights: bool = False,
    ):
        spatial = q_feat.dim() == 4
        if spatial:
            b, c, h, w = q_feat.shape
            q_in = q_feat.reshape(b, c, h * w).transpose(1, 2)
        else:
            q_in = q_feat
            b = q_in.shape[0]
        nq = q_in.shape[1]
        nk = lr_tokens.shape[1]

        q = self.to_q(q_in).reshape(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.to_k(lr_tokens).reshape(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.to_v(lr_tokens).reshape(b, nk, self.num_heads, self.head_dim).transpose(1, 2)

        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = logits.softmax(dim=-1)
        out = weights @ v
        out = out.transpose(1, 2).reshape(b, nq, self.num_heads * self.head_dim)
        out = self.to_out(out)
        if spatial:
            out = out.transpose(1, 2).reshape(b, -1, h, w)
        return (out, weights) if return_weights else out


class CvaeEncoder(nn.Module):
    """Encodes the observed image stack into diagonal-Gaussian latent params.

    Sigma comes through exp(0.5 * logvar), so positivity is structural.
    """

    def __init__(self, in_channels: int, latent_dim: int = 64, hidden: int = 32):
        super().__init__()
        self.latent_dim = latent_dim
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.to_mean = nn.Linear(hidden * 2 * 16, latent_dim)
        self.to_logvar = nn.Linear(hidden * 2 * 16, latent_dim)

    def forward(self, c: torch.Tensor) -> GaussianParams:
        h = self.conv(c).flatten(1)
        mean = self.to_mean(h)
        logvar = self.to_logvar(h).clamp(-30.0, 20.0)
        return GaussianParams(mean=mean, sigma=torch.exp(0.5 * logvar))


def reparameterize(p: GaussianParams, delta: torch.Tensor) -> torch.Tensor:
    """Affine latent draw: mean + delta * sigma, with caller-supplied delta."""
    if delta.shape != p.mean.shape:
        raise ValueError(f"delta shape {tuple(delta.shape)} != mean shape {tuple(p.mean.shape)}")
    return p.mean + delta * p.sigma


def kl_to_standard_normal(p: GaussianParams) -> torch.Tensor:
    """KL(N(mean, sigma^2) || N(0, I)), summed over dims, averaged over batch.

    0.5 * (-sum(log sigma^2 + 1) + sum(sigma^2) + sum(mean^2)); zero exactly
    when mean = 0 and sigma = 1.
    """
    if bool((p.sigma <= 0).any()):
        raise ValueError("sigma must be strictly positive")
    var = p.sigma**2
    per_elem = 0.5 * (-(torch.log(var) + 1) + var + p.mean**2)
    return per_elem.reshape(per_elem.shape[0], -1).sum(dim=1).mean()


class CvaeDecoder(nn.Module):
    """Decodes a latent vector into a spatial conditioning map.

    The output is aligned with the UNet bottleneck: `out_channels` wide, and
    resized to whatever spatial grid the bottleneck uses.
    """

    def __init__(self, latent_dim: int, out_channels: int, hidden: int = 32, base_hw: int = 4):
        super().__init__()
        self.base_hw = base_hw
        self.hidden = hidden
        self.fc = nn.Linear(latent_dim, hidden * base_hw * base_hw)
        self.conv = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, out_channels, 3, padding=1),
        )

    def forward(self, latent: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        b = latent.shape[0]
        h = self.fc(latent).reshape(b, self.hidden, self.base_hw, self.base_hw)
        if (self.base_hw, self.base_hw) != tuple(out_hw):
            h = F.interpolate(h, size=tuple(out_hw), mode="nearest")
        return self.conv(h)


class FeatureFusion(nn.Module):
    """Fuses the conditioning map into the bottleneck by affine modulation.

    Learned heads on the bottleneck produce a spatial mean and a positive
    scale; the output is mean + scale * cond_map.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.mean_head = nn.Conv2d(channels, channels, 3, padding=1)
        self.log_scale_head = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(
        self, cond_map: torch.Tensor, bottleneck: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if cond_map.shape != bottleneck.shape:
            raise ValueError(
                f"cond_map {tuple(cond_map.shape)} not aligned with bottleneck {tuple(bottleneck.shape)}"
            )
        fused_mean = self.mean_head(bottleneck)
        fused_scale = torch.exp(self.log_scale_head(bottleneck).clamp(-8.0, 8.0))
        fused = fused_mean + fused_scale * cond_map
        return fused_mean, fused_scale, fused
