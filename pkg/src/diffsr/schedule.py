"""Noise-schedule algebra for the diffusion Markov chain.

Owns the beta/alpha/alpha-bar tables and every closed-form expression built
from them: forward marginal sampling, the noise-parameterized posterior mean,
single reverse steps, and clean-image recovery from a noise estimate.

Steps are 1-based throughout; ``alpha_bar(0) == 1`` by the empty-product
convention. Tables are kept in float64 and cast to the image dtype at the
point of use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

StepLike = int | torch.Tensor


class DegenerateScheduleError(ValueError):
    """Raised when schedule values underflow past usable precision."""


def _as_index(i: StepLike, T: int) -> torch.Tensor:
    """Validate a 1-based step (int or batch of ints) and return a long tensor."""
    idx = torch.as_tensor(i, dtype=torch.long)
    if idx.dim() > 1:
        raise ValueError(f"step index must be a scalar or 1-D batch, got shape {tuple(idx.shape)}")
    if idx.numel() == 0:
        raise ValueError("empty step index")
    if int(idx.min()) < 1 or int(idx.max()) > T:
        raise ValueError(f"step index out of range [1, {T}]: {i}")
    return idx


def _gather(table: torch.Tensor, idx: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Pick per-step values (1-based idx) and reshape for broadcasting over `like`."""
    vals = table[idx - 1].to(like.dtype)
    if vals.dim() == 0:
        return vals
    return vals.reshape(-1, *([1] * (like.dim() - 1)))


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha-bar tables plus the fixed reverse std.

    ``sigmas[i-1]`` is the reverse-step standard deviation for step i; by
    default sqrt(beta_i), optionally the tilde-posterior variance.
    """

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor = field(init=False)
    alpha_bars: torch.Tensor = field(init=False)
    sigmas: torch.Tensor = field(init=False)
    sigma_mode: str = "beta_sqrt"

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64)
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if betas.shape != (self.T,):
            raise ValueError(f"betas must have shape ({self.T},), got {tuple(betas.shape)}")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("every beta must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        if self.sigma_mode == "beta_sqrt":
            sigmas = betas.sqrt()
        elif self.sigma_mode == "posterior":
            # tilde-beta_i = (1 - abar_{i-1}) / (1 - abar_i) * beta_i, abar_0 = 1
            prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
            sigmas = ((1.0 - prev) / (1.0 - alpha_bars) * betas).sqrt()
        else:
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "sigmas", sigmas)

    def beta(self, i: int) -> float:
        return float(self.betas[_as_index(i, self.T) - 1])

    def alpha(self, i: int) -> float:
        """alpha_i, with alpha_0 := 1 (empty product)."""
        if isinstance(i, int) and i == 0:
            return 1.0
        return float(self.alphas[_as_index(i, self.T) - 1])

    def alpha_bar(self, i: int) -> float:
        """Cumulative product up to step i, with alpha_bar(0) := 1."""
        if isinstance(i, int) and i == 0:
            return 1.0
        return float(self.alpha_bars[_as_index(i, self.T) - 1])

    def sigma(self, i: int) -> float:
        return float(self.sigmas[_as_index(i, self.T) - 1])


def make_linear_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sigma_mode: str = "beta_sqrt",
) -> NoiseSchedule:
    """Linearly interpolated betas from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule(T=T, betas=betas, sigma_mode=sigma_mode)


def make_cosine_schedule(T: int, s: float = 8e-3, sigma_mode: str = "beta_sqrt") -> NoiseSchedule:
    """Squared-cosine alpha-bar schedule with betas clipped to (0, 0.999]."""
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    steps = torch.arange(T + 1, dtype=torch.float64) / T
    bars = torch.cos((steps + s) / (1 + s) * torch.pi / 2) ** 2
    bars = bars / bars[0]
    betas = (1 - bars[1:] / bars[:-1]).clamp(min=1e-8, max=0.999)
    return NoiseSchedule(T=T, betas=betas, sigma_mode=sigma_mode)


def make_schedule(
    kind: str,
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sigma_mode: str = "beta_sqrt",
) -> NoiseSchedule:
    if kind == "linear":
        return make_linear_schedule(T, beta_start, beta_end, sigma_mode)
    if kind == "cosine":
        return make_cosine_schedule(T, sigma_mode=sigma_mode)
    raise ValueError(f"unknown schedule kind {kind!r}")


def forward_sample(
    x0: torch.Tensor, i: StepLike, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form marginal draw: sqrt(abar_i)*x0 + sqrt(1-abar_i)*eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    idx = _as_index(i, sched.T)
    abar = _gather(sched.alpha_bars, idx, x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def posterior_mean(
    x_i: torch.Tensor, eps_hat: torch.Tensor, i: StepLike, sched: NoiseSchedule
) -> torch.Tensor:
    """Noise-parameterized reverse mean: (x_i - beta_i/sqrt(1-abar_i) * eps_hat) / sqrt(alpha_i)."""
    if x_i.shape != eps_hat.shape:
        raise ValueError(f"x_i/eps_hat shape mismatch: {tuple(x_i.shape)} vs {tuple(eps_hat.shape)}")
    idx = _as_index(i, sched.T)
    one_minus_abar = 1.0 - sched.alpha_bars[idx - 1]
    if bool((one_minus_abar <= 0).any()):
        raise DegenerateScheduleError("1 - alpha_bar underflowed to zero; schedule too shallow for this step")
    beta = _gather(sched.betas, idx, x_i)
    alpha = _gather(sched.alphas, idx, x_i)
    oma = one_minus_abar.to(x_i.dtype)
    if oma.dim() > 0:
        oma = oma.reshape(-1, *([1] * (x_i.dim() - 1)))
    return (x_i - beta / oma.sqrt() * eps_hat) / alpha.sqrt()


def reverse_step(
    x_i: torch.Tensor,
    eps_hat: torch.Tensor,
    i: StepLike,
    z: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One reverse transition: posterior mean plus sigma_i * z.

    The final step (i == 1) is deterministic by convention: z must be zero.
    """
    idx = _as_index(i, sched.T)
    if idx.dim() == 0:
        final_rows_nonzero = int(idx) == 1 and bool((z != 0).any())
    else:
        final_rows_nonzero = bool((z.reshape(z.shape[0], -1)[idx == 1] != 0).any())
    if final_rows_nonzero:
        raise ValueError("injected noise z must be all-zero at step 1")
    mean = posterior_mean(x_i, eps_hat, i, sched)
    sigma = _gather(sched.sigmas, idx, x_i)
    return mean + sigma * z


def predict_x0(
    x_i: torch.Tensor,
    eps_hat: torch.Tensor,
    i: StepLike,
    sched: NoiseSchedule,
    clamp: bool = False,
) -> torch.Tensor:
    """Invert the forward marginal: (x_i - sqrt(1-abar_i)*eps_hat) / sqrt(abar_i)."""
    if x_i.shape != eps_hat.shape:
        raise ValueError(f"x_i/eps_hat shape mismatch: {tuple(x_i.shape)} vs {tuple(eps_hat.shape)}")
    idx = _as_index(i, sched.T)
    abar = sched.alpha_bars[idx - 1]
    if bool((abar <= 0).any()):
        raise DegenerateScheduleError("alpha_bar underflowed to zero; cannot invert the marginal")
    abar_b = _gather(sched.alpha_bars, idx, x_i)
    out = (x_i - (1.0 - abar_b).sqrt() * eps_hat) / abar_b.sqrt()
    return out.clamp(-1.0, 1.0) if clamp else out
