"""Stochastic state encoder with a variational information bottleneck."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from flap.nets import GaussianLatent, GaussianMLP, kl_standard_normal

LATENT_DIM = 16


class StateEncoder(nn.Module):
    """Maps observations (and goal observations) to a diagonal Gaussian over latents.

    One parameter set embeds both states and goals. Inputs are standardised by
    fixed per-dimension statistics (identity until :meth:`fit_normalizer`).
    """

    def __init__(self, obs_dim: int = 16, latent_dim: int = LATENT_DIM, hidden: tuple[int, ...] = (128, 128)):
        super().__init__()
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.net = GaussianMLP(obs_dim, latent_dim, hidden)
        self.register_buffer("obs_mean", torch.zeros(obs_dim))
        self.register_buffer("obs_std", torch.ones(obs_dim))

    def fit_normalizer(self, observations, min_std: float = 1e-3) -> None:
        """Set the input statistics from a sample of observations (not trained afterwards)."""
        x = np.asarray(observations, dtype=np.float64)
        self.obs_mean.copy_(torch.as_tensor(x.mean(0)))
        self.obs_std.copy_(torch.as_tensor(np.maximum(x.std(0), min_std)))

    def forward(self, obs: torch.Tensor) -> GaussianLatent:
        return self.net((obs - self.obs_mean) / self.obs_std)

    def encode(self, obs) -> GaussianLatent:
        """Checked forward pass accepting arrays or tensors of shape (..., obs_dim)."""
        x = torch.as_tensor(np.asarray(obs) if not torch.is_tensor(obs) else obs)
        x = x.to(next(self.parameters()).dtype)
        if x.shape[-1] != self.obs_dim:
            raise ValueError(f"expected observations of size {self.obs_dim}, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("observation contains NaN or infinite entries")
        return self(x)

    @torch.no_grad()
    def encode_mean(self, obs) -> torch.Tensor:
        return self.encode(obs).mean

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)


def sample_latent(gl: GaussianLatent, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mean + exp(log_std) * noise``."""
    return gl.mean + gl.log_std.exp() * noise


def kl_to_standard_normal(gl: GaussianLatent) -> torch.Tensor:
    return kl_standard_normal(gl)
