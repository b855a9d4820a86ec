"""Conditioned invertible feature flow with exact density bookkeeping.

A stack of flow steps applied to a feature map, each step being a
per-channel affine normalization, an LU-parameterized invertible 1x1
channel mixing, and a conditional affine coupling whose scale/shift network
sees half the channels concatenated with a conditioning map. Levels are
separated by space-to-channel squeezes. Every transform reports its exact
log-determinant so the stack supports exact likelihood evaluation and
exact inversion.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import GaussianParams

LOG_TWO_PI = 1.8378770664093453


@dataclass
class FlowState:
    """Transformed features plus the accumulated per-sample log-determinant."""

    features: torch.Tensor
    log_det: torch.Tensor


class SingularMixingError(RuntimeError):
    """Raised when the 1x1 mixing matrix degenerates toward singularity."""


def squeeze2x(x: torch.Tensor) -> torch.Tensor:
    """Space-to-channel: [B,C,H,W] -> [B,4C,H/2,W/2]. Volume-preserving."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims {(h, w)} must be even to squeeze")
    x = x.reshape(b, c, h // 2, 2, w // 2, 2)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(b, 4 * c, h // 2, w // 2)


def unsqueeze2x(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    if c % 4:
        raise ValueError(f"channel count {c} must be divisible by 4 to unsqueeze")
    x = x.reshape(b, c // 4, 2, 2, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c // 4, h * 2, w * 2)


class ActNorm(nn.Module):
    """Per-channel affine y = exp(log_scale) * (x + bias).

    Parameters are data-initialized on the first forward batch so that the
    outputs have zero mean and unit std per channel; the one-time mutation
    is guarded by the `initialized` flag.
    """

    def __init__(self, channels: int, data_init: bool = True):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.register_buffer("initialized", torch.tensor(0 if data_init else 1, dtype=torch.uint8))

    @torch.no_grad()
    def _data_init(self, x: torch.Tensor):
        mean = x.mean(dim=(0, 2, 3), keepdim=True)
        std = x.std(dim=(0, 2, 3), unbiased=False, keepdim=True).clamp_min(1e-6)
        self.bias.copy_(-mean)
        self.log_scale.copy_(-std.log())
        self.initialized.fill_(1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.initialized.item() == 0:
            self._data_init(x)
        y = (x + self.bias) * self.log_scale.exp()
        log_det = x.shape[2] * x.shape[3] * self.log_scale.sum()
        return y, log_det.expand(x.shape[0])

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        return y * (-self.log_scale).exp() - self.bias


class InvertibleMixing(nn.Module):
    """1x1 channel mixing with an LU-parameterized weight.

    W = P L (U + diag(sign_s * exp(log_s))) with P a fixed permutation, L
    unit-lower, U strictly-upper. log|det W| = sum(log_s), so the
    determinant never needs a dense factorization at run time.
    """

    MAX_DIAG_RATIO = 1e10

    def __init__(self, channels: int, identity_init: bool = False):
        super().__init__()
        if identity_init:
            w0 = torch.eye(channels)
        else:
            w0 = torch.linalg.qr(torch.randn(channels, channels))[0]
        p, l, u = torch.linalg.lu(w0)
        s = u.diagonal()
        self.register_buffer("perm", p)
        self.register_buffer("sign_s", s.sign())
        self.lower = nn.Parameter(l.tril(-1))
        self.upper = nn.Parameter(u.triu(1))
        self.log_s = nn.Parameter(s.abs().log())
        self.register_buffer("eye", torch.eye(channels))
        self.register_buffer("lower_mask", torch.ones(channels, channels).tril(-1))

    def _weight(self) -> torch.Tensor:
        s_abs = self.log_s.exp()
        if float(s_abs.min()) < 1e-12 or float(s_abs.max() / s_abs.min()) > self.MAX_DIAG_RATIO:
            raise SingularMixingError("mixing matrix condition guard tripped (degenerate diagonal)")
        lower = self.lower * self.lower_mask + self.eye
        upper = self.upper.triu(1) + torch.diag(self.sign_s * s_abs)
        return self.perm @ lower @ upper

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = self._weight()
        y = F.conv2d(x, w.unsqueeze(-1).unsqueeze(-1))
        log_det = x.shape[2] * x.shape[3] * self.log_s.sum()
        return y, log_det.expand(x.shape[0])

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        w_inv = torch.linalg.inv(self._weight().double()).to(y.dtype)
        return F.conv2d(y, w_inv.unsqueeze(-1).unsqueeze(-1))


class ConditionalCoupling(nn.Module):
    """Affine coupling where the un-transformed half plus the conditioning
    map drive the scale/shift of the other half.

    The final conv of the conditioner is zero-initialized, so a fresh
    coupling is the identity with zero log-determinant. Log-scales are
    tanh-bounded for stability.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int = 64, scale_cap: float = 2.0):
        super().__init__()
        if channels < 2:
            raise ValueError("coupling needs at least 2 channels to split")
        self.ch_a = channels // 2
        self.ch_b = channels - self.ch_a
        self.scale_cap = scale_cap
        self.net = nn.Sequential(
            nn.Conv2d(self.ch_a + cond_channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.SiLU(),
            nn.Conv2d(hidden, 2 * self.ch_b, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _params(self, x_a: torch.Tensor, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw = self.net(torch.cat([x_a, cond], dim=1))
        raw_s, shift = raw.split([self.ch_b, self.ch_b], dim=1)
        log_scale = self.scale_cap * torch.tanh(raw_s / self.scale_cap)
        return log_scale, shift

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x_a, x_b = x.split([self.ch_a, self.ch_b], dim=1)
        log_scale, shift = self._params(x_a, cond)
        y_b = x_b * log_scale.exp() + shift
        log_det = log_scale.reshape(x.shape[0], -1).sum(dim=1)
        return torch.cat([x_a, y_b], dim=1), log_det

    def inverse(self, y: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        y_a, y_b = y.split([self.ch_a, self.ch_b], dim=1)
        log_scale, shift = self._params(y_a, cond)
        x_b = (y_b - shift) * (-log_scale).exp()
        return torch.cat([y_a, x_b], dim=1)


class FlowStep(nn.Module):
    """ActNorm -> invertible 1x1 mixing -> conditional coupling."""

    def __init__(self, channels: int, cond_channels: int, hidden: int = 64,
                 identity_init: bool = False, actnorm_data_init: bool = True):
        super().__init__()
        self.actnorm = ActNorm(channels, data_init=actnorm_data_init)
        self.mixing = InvertibleMixing(channels, identity_init=identity_init)
        self.coupling = ConditionalCoupling(channels, cond_channels, hidden=hidden)

    def forward(self, x, cond):
        x, d1 = self.actnorm(x)
        x, d2 = self.mixing(x)
        x, d3 = self.coupling(x, cond)
        return x, d1 + d2 + d3

    def inverse(self, y, cond):
        y = self.coupling.inverse(y, cond)
        y = self.mixing.inverse(y)
        return self.actnorm.inverse(y)


class FeatureFlow(nn.Module):
    """Multi-level conditioned flow over feature maps.

    Each level optionally squeezes space into channels, then applies
    `steps_per_level` flow steps. The conditioning map rides along through
    the same squeezes so couplings always see a spatially aligned tensor.
    """

    def __init__(self, in_channels: int, cond_channels: int, levels: int = 2,
                 steps_per_level: int = 4, hidden: int = 64, squeeze: bool = True,
                 identity_init: bool = False, actnorm_data_init: bool = True):
        super().__init__()
        if levels < 1 or steps_per_level < 1:
            raise ValueError("levels and steps_per_level must be >= 1")
        self.levels = levels
        self.squeeze = squeeze
        self.level_steps = nn.ModuleList()
        ch, cch = in_channels, cond_channels
        for _ in range(levels):
            if squeeze:
                ch, cch = ch * 4, cch * 4
            steps = nn.ModuleList(
                FlowStep(ch, cch, hidden=hidden, identity_init=identity_init,
                         actnorm_data_init=actnorm_data_init)
                for _ in range(steps_per_level)
            )
            self.level_steps.append(steps)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> FlowState:
        if x.shape[2:] != cond.shape[2:]:
            raise ValueError(
                f"conditioning map {tuple(cond.shape[2:])} not spatially aligned with input {tuple(x.shape[2:])}"
            )
        log_det = x.new_zeros(x.shape[0])
        for steps in self.level_steps:
            if self.squeeze:
                x, cond = squeeze2x(x), squeeze2x(cond)
            for step in steps:
                x, d = step(x, cond)
                log_det = log_det + d
        return FlowState(features=x, log_det=log_det)

    def inverse(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        conds = []
        for _ in self.level_steps:
            if self.squeeze:
                cond = squeeze2x(cond)
            conds.append(cond)
        x = z
        for steps, c in zip(reversed(self.level_steps), reversed(conds)):
            for step in reversed(steps):
                x = step.inverse(x, c)
            if self.squeeze:
                x = unsqueeze2x(x)
        return x

    def transform_base(self, base_map: torch.Tensor) -> torch.Tensor:
        """Carry an input-geometry base-parameter map into output geometry."""
        if self.squeeze:
            for _ in range(self.levels):
                base_map = squeeze2x(base_map)
        return base_map


def gaussian_log_density(z: torch.Tensor, base: GaussianParams) -> torch.Tensor:
    """Elementwise diagonal-Gaussian log density, summed per sample."""
    mean = torch.as_tensor(base.mean, dtype=z.dtype).expand_as(z)
    sigma = torch.as_tensor(base.sigma, dtype=z.dtype).expand_as(z)
    elem = -0.5 * ((z - mean) / sigma) ** 2 - sigma.log() - 0.5 * LOG_TWO_PI
    return elem.reshape(z.shape[0], -1).sum(dim=1)


def flow_forward(flow: FeatureFlow, x: torch.Tensor, cond: torch.Tensor) -> FlowState:
    return flow(x, cond)


def flow_inverse(flow: FeatureFlow, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    return flow.inverse(z, cond)


def flow_nll(
    flow: FeatureFlow,
    x: torch.Tensor,
    cond: torch.Tensor,
    base: GaussianParams,
    reduction: str = "mean",
) -> torch.Tensor:
    """Negative log density under the flowed Gaussian: -log N(f(x)) - log|det|."""
    state = flow(x, cond)
    nll = -(gaussian_log_density(state.features, base) + state.log_det)
    if reduction == "mean":
        return nll.mean()
    if reduction == "none":
        return nll
    raise ValueError(f"unknown reduction {reduction!r}")
