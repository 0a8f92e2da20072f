"""Conditional VAE over latent states: which latents are reachable ``delta_t`` steps ahead.

``infer_code`` is the CVAE encoder q(u | z, z'), ``decode`` the generative model
m(z' | z, u). Training minimises

    KL(m(. | z, u) || phi(. | s'))  +  beta * KL(q(. | z, z') || N(0, I))

with z ~ phi(. | s), z' ~ phi(. | s') and u ~ q, one reparameterised draw each.
The state encoder phi is treated as a fixed snapshot (no gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from flap.errors import ConfigError, NonFiniteLossError
from flap.nets import GaussianLatent, GaussianMLP, kl_diag_gaussians, kl_standard_normal

CODE_DIM = 8


@dataclass
class AffordanceConfig:
    u_dim: int = CODE_DIM
    delta_t: int = 25
    beta: float = 0.1
    hidden: int = 128
    learning_rate: float = 3e-4
    batch_size: int = 128

    def validate(self, episode_length: int | None = None) -> None:
        if self.delta_t <= 0 or (episode_length is not None and self.delta_t > episode_length):
            raise ConfigError(f"delta_t={self.delta_t} must be in (0, episode length]")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.u_dim <= 0 or self.hidden <= 0:
            raise ConfigError("u_dim and hidden must be positive")


class AffordanceModel(nn.Module):
    """``decode`` predicts the next latent as an offset from the current one."""

    def __init__(self, latent_dim: int = 16, cfg: AffordanceConfig | None = None):
        super().__init__()
        self.cfg = cfg or AffordanceConfig()
        self.latent_dim = latent_dim
        hidden = (self.cfg.hidden, self.cfg.hidden)
        self.code_encoder = GaussianMLP(2 * latent_dim, self.cfg.u_dim, hidden)
        self.decoder = GaussianMLP(latent_dim + self.cfg.u_dim, latent_dim, hidden)

    def infer_code(self, z: torch.Tensor, z_next: torch.Tensor) -> GaussianLatent:
        return self.code_encoder(torch.cat([z, z_next], -1))

    def decode(self, z: torch.Tensor, u: torch.Tensor) -> GaussianLatent:
        out = self.decoder(torch.cat([z, u], -1))
        return GaussianLatent(z + out.mean, out.log_std)

    @torch.no_grad()
    def decode_mean(self, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return self.decode(z, u).mean

    @torch.no_grad()
    def sample_reachable(self, z, rng: np.random.Generator) -> torch.Tensor:
        """Decoder mean for a code drawn from the prior."""
        z = torch.as_tensor(z, dtype=self._dtype())
        u = torch.as_tensor(rng.standard_normal((*z.shape[:-1], self.cfg.u_dim)), dtype=z.dtype)
        return self.decode(z, u).mean

    def freeze(self) -> None:
        self.requires_grad_(False)

    def _dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def elbo_terms(
    model: AffordanceModel,
    post_t: GaussianLatent,
    post_tp: GaussianLatent,
    noise_z: torch.Tensor,
    noise_zp: torch.Tensor,
    noise_u: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-row (reconstruction KL, code KL) for given encoder posteriors and noise."""
    z = post_t.mean + post_t.std * noise_z
    z_next = post_tp.mean + post_tp.std * noise_zp
    q = model.infer_code(z, z_next)
    u = q.mean + q.std * noise_u
    m = model.decode(z, u)
    return kl_diag_gaussians(m, post_tp), kl_standard_normal(q)


def elbo_loss(model: AffordanceModel, obs_t, obs_tp, encoder: nn.Module, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over the batch of the negative ELBO; the encoder receives no gradient."""
    dtype = next(model.parameters()).dtype
    obs_t = torch.as_tensor(np.asarray(obs_t), dtype=dtype)
    obs_tp = torch.as_tensor(np.asarray(obs_tp), dtype=dtype)
    with torch.no_grad():
        post_t = encoder(obs_t)
        post_tp = encoder(obs_tp)
    n, zdim = post_t.mean.shape
    noise = torch.randn((3, n, max(zdim, model.cfg.u_dim)), generator=generator, dtype=dtype)
    rec, code = elbo_terms(
        model, post_t, post_tp, noise[0, :, :zdim], noise[1, :, :zdim], noise[2, :, : model.cfg.u_dim]
    )
    return (rec + model.cfg.beta * code).mean()


class AffordanceTrainer:
    def __init__(self, model: AffordanceModel, encoder: nn.Module, seed: int = 0):
        self.model = model
        self.encoder = encoder
        self.opt = torch.optim.Adam(model.parameters(), lr=model.cfg.learning_rate)
        self.generator = torch.Generator().manual_seed(seed)
        self.n_updates = 0

    def step(self, obs_t, obs_tp) -> float:
        loss = elbo_loss(self.model, obs_t, obs_tp, self.encoder, self.generator)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite affordance loss at update {self.n_updates}", {"elbo": value})
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.n_updates += 1
        return value
