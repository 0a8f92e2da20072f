"""Small MLP building blocks and diagonal-Gaussian helpers shared by the models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


def mlp(in_dim: int, out_dim: int, hidden: tuple[int, ...] = (128, 128)) -> nn.Sequential:
    layers: list[nn.Module] = []
    last = in_dim
    for width in hidden:
        layers += [nn.Linear(last, width), nn.ReLU()]
        last = width
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


@dataclass
class GaussianLatent:
    """Diagonal Gaussian; ``mean`` and ``log_std`` share the shape (..., dim)."""

    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        noise = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * noise

    def detach(self) -> "GaussianLatent":
        return GaussianLatent(self.mean.detach(), self.log_std.detach())


class GaussianMLP(nn.Module):
    """MLP trunk with separate mean and log-std heads; log-std clamped."""

    def __init__(self, in_dim: int, out_dim: int, hidden: tuple[int, ...] = (128, 128)):
        super().__init__()
        layers: list[nn.Module] = []
        last = in_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        self.trunk = nn.Sequential(*layers)
        self.mean_head = nn.Linear(last, out_dim)
        self.log_std_head = nn.Linear(last, out_dim)

    def forward(self, x: torch.Tensor) -> GaussianLatent:
        h = self.trunk(x)
        log_std = self.log_std_head(h).clamp(LOG_STD_MIN, LOG_STD_MAX)
        return GaussianLatent(self.mean_head(h), log_std)

    def zero_heads(self) -> None:
        for head in (self.mean_head, self.log_std_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)


def kl_diag_gaussians(p: GaussianLatent, q: GaussianLatent) -> torch.Tensor:
    """KL(p || q) summed over the last dimension."""
    var_ratio = torch.exp(2.0 * (p.log_std - q.log_std))
    mean_term = ((p.mean - q.mean) / q.std) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - 2.0 * (p.log_std - q.log_std)).sum(-1)


def kl_standard_normal(p: GaussianLatent) -> torch.Tensor:
    """KL(p || N(0, I)) summed over the last dimension."""
    return 0.5 * (p.mean**2 + torch.exp(2.0 * p.log_std) - 1.0 - 2.0 * p.log_std).sum(-1)


def standard_normal_log_prob(u: torch.Tensor) -> torch.Tensor:
    d = u.shape[-1]
    return -0.5 * (u**2).sum(-1) - 0.5 * d * math.log(2.0 * math.pi)


def gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (x - mean) / log_std.exp()
    return (-0.5 * z**2 - log_std - 0.5 * math.log(2.0 * math.pi)).sum(-1)


def polyak_update(target: nn.Module, source: nn.Module, rate: float) -> None:
    with torch.no_grad():
        for t, s in zip(target.parameters(), source.parameters()):
            t.mul_(1.0 - rate).add_(s, alpha=rate)


def parameter_bytes(module: nn.Module) -> bytes:
    """Raw bytes of every parameter, for byte-level freeze checks."""
    return b"".join(p.detach().cpu().numpy().tobytes() for p in module.parameters())
