"""Diagonal-Gaussian posteriors on the U bottlenecks and the KL losses over them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0


@dataclass
class GaussianLatent:
    """Posterior ``N(mu, exp(log_var))`` per batch element, shape ``(N, M_z)``.

    ``log_var`` is clamped to ``[-20, 20]`` on construction.
    """

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ in shape")
        if self.mu.dim() == 1:
            self.mu = self.mu.unsqueeze(0)
            self.log_var = self.log_var.unsqueeze(0)
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def detach(self) -> "GaussianLatent":
        return GaussianLatent(self.mu.detach(), self.log_var.detach())


@dataclass
class LatentSample:
    z: torch.Tensor
    eps: torch.Tensor


def _as_generator(rng: Union[int, torch.Generator, None]) -> Optional[torch.Generator]:
    if rng is None or isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng))


def reparameterize(q: GaussianLatent, rng: Union[int, torch.Generator, None] = None) -> LatentSample:
    """Draw ``z = mu + sigma * eps`` with ``eps ~ N(0, I)`` from ``rng``.

    ``rng`` may be an int seed or a ``torch.Generator``; the draw is
    differentiable with respect to ``mu`` and ``log_var``.
    """
    gen = _as_generator(rng)
    eps = torch.randn(q.mu.shape, generator=gen, dtype=q.mu.dtype)
    return LatentSample(q.mu + q.std * eps, eps)


def kl_to_standard_normal(q: GaussianLatent) -> torch.Tensor:
    """KL(q || N(0, I)), summed over latent dims and averaged over the batch."""
    per_dim = 1.0 + q.log_var - q.mu.pow(2) - q.log_var.exp()
    return (-0.5 * per_dim.sum(dim=-1)).mean()


def cross_kl(q_gen: GaussianLatent, q_dis: GaussianLatent) -> torch.Tensor:
    """KL(q_dis || q_gen): pulls the discriminator's posterior toward the generator's.

    Per dimension ``log(s_G / s_D) + (s_D^2 + (mu_D - mu_G)^2) / (2 s_G^2) - 1/2``,
    summed over dims, averaged over the batch.  Not symmetric.
    """
    if q_gen.mu.shape != q_dis.mu.shape:
        raise ValueError(f"latent shapes differ: {tuple(q_gen.mu.shape)} vs {tuple(q_dis.mu.shape)}")
    var_g = q_gen.log_var.exp()
    per_dim = (
        0.5 * (q_gen.log_var - q_dis.log_var)
        + (q_dis.log_var.exp() + (q_dis.mu - q_gen.mu).pow(2)) / (2.0 * var_g)
        - 0.5
    )
    return per_dim.sum(dim=-1).mean()


def weighted_discriminator_kl(kl_real, kl_fake, alpha: float, beta: float):
    """Blend of the discriminator's real/fake KL terms: ``(a*real + b*fake) / (a + b)``."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be non-negative, got {alpha}, {beta}")
    if alpha + beta == 0:
        raise ValueError("alpha + beta must be > 0")
    return (alpha * kl_real + beta * kl_fake) / (alpha + beta)


def broadcast_latent(z: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Tile a ``(N, M_z)`` code over a ``(height, width)`` grid."""
    return z[:, :, None, None].expand(-1, -1, height, width)


class LatentHead(nn.Module):
    """Global-average-pool a bottleneck map, then linear heads for ``mu`` and ``log_var``."""

    def __init__(self, in_channels: int, latent_dim: int):
        super().__init__()
        if latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
        self.latent_dim = latent_dim
        self.mu = nn.Linear(in_channels, latent_dim)
        self.log_var = nn.Linear(in_channels, latent_dim)

    def forward(self, features: torch.Tensor) -> GaussianLatent:
        pooled = features.mean(dim=(2, 3))
        return GaussianLatent(self.mu(pooled), self.log_var(pooled))
