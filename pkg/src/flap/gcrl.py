"""Goal-conditioned implicit Q-learning over bottlenecked latents.

Value, Q and policy heads read ``(z, z_goal)`` where both latents come from the
shared :class:`~flap.encoder.StateEncoder`. During pre-training the encoder is
updated by all three RL losses plus ``alpha_vib`` times the KL of the state and
goal posteriors to the unit Gaussian; during fine-tuning it is frozen.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from flap import env as E
from flap.encoder import StateEncoder
from flap.errors import ConfigError, NonFiniteLossError
from flap.nets import LOG_STD_MAX, LOG_STD_MIN, gaussian_log_prob, kl_standard_normal, mlp, polyak_update


class Phase(str, enum.Enum):
    PRETRAIN = "PRETRAIN"
    FINETUNE = "FINETUNE"


@dataclass
class IQLConfig:
    gamma: float = 0.99
    tau_expectile: float = 0.7
    awr_temperature: float = 3.0
    awr_weight_clip: float = 100.0
    polyak_rate: float = 0.005
    alpha_vib: float = 0.01
    learning_rate: float = 3e-4
    batch_size: int = 128
    latent_dim: int = 16
    hidden: int = 128

    def validate(self) -> None:
        checks = {
            "gamma": 0.0 <= self.gamma < 1.0,
            "tau_expectile": 0.5 < self.tau_expectile < 1.0,
            "awr_temperature": self.awr_temperature > 0,
            "awr_weight_clip": self.awr_weight_clip > 0,
            "polyak_rate": 0.0 < self.polyak_rate <= 1.0,
            "alpha_vib": self.alpha_vib >= 0,
            "learning_rate": self.learning_rate > 0,
            "batch_size": self.batch_size > 0,
            "latent_dim": self.latent_dim > 0,
            "hidden": self.hidden > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"IQL config out of range: {', '.join(bad)}")


@dataclass
class LossReport:
    value_loss: float
    q_loss: float
    policy_loss: float
    kl_state: float
    kl_goal: float
    rl_loss: float
    total_loss: float

    @property
    def mean_kl(self) -> float:
        return 0.5 * (self.kl_state + self.kl_goal)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mean_kl"] = self.mean_kl
        return d


class GaussianPolicy(nn.Module):
    """Tanh-squashed mean with a learned, state-independent log-std."""

    def __init__(self, latent_dim: int, action_dim: int, hidden: tuple[int, ...]):
        super().__init__()
        self.net = mlp(2 * latent_dim, action_dim, hidden)
        self.log_std = nn.Parameter(torch.full((action_dim,), -1.0))

    def forward(self, z: torch.Tensor, z_goal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean = torch.tanh(self.net(torch.cat([z, z_goal], -1)))
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).expand_as(mean)
        return mean, log_std

    def log_prob(self, z: torch.Tensor, z_goal: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        mean, log_std = self(z, z_goal)
        return gaussian_log_prob(action, mean, log_std)


class QNetwork(nn.Module):
    def __init__(self, latent_dim: int, action_dim: int, hidden: tuple[int, ...]):
        super().__init__()
        self.net = mlp(2 * latent_dim + action_dim, 1, hidden)

    def forward(self, z, z_goal, action):
        return self.net(torch.cat([z, z_goal, action], -1)).squeeze(-1)


class ValueNetwork(nn.Module):
    def __init__(self, latent_dim: int, hidden: tuple[int, ...]):
        super().__init__()
        self.net = mlp(2 * latent_dim, 1, hidden)

    def forward(self, z, z_goal):
        return self.net(torch.cat([z, z_goal], -1)).squeeze(-1)


# -- losses -------------------------------------------------------------------------


def expectile_loss(residual: torch.Tensor, tau: float) -> torch.Tensor:
    """Asymmetric squared loss ``|tau - 1{residual < 0}| * residual**2`` (elementwise)."""
    weight = torch.where(residual < 0, 1.0 - tau, tau)
    return weight * residual**2


def value_loss(agent: "GoalConditionedIQL", z, z_goal, action) -> torch.Tensor:
    with torch.no_grad():
        target_q = torch.min(agent.q1_target(z, z_goal, action), agent.q2_target(z, z_goal, action))
    return expectile_loss(target_q - agent.value(z, z_goal), agent.cfg.tau_expectile).mean()


def q_loss(agent: "GoalConditionedIQL", z, z_goal, action, reward, z_next, done) -> torch.Tensor:
    with torch.no_grad():
        target = reward + agent.cfg.gamma * (1.0 - done) * agent.value(z_next, z_goal)
    q1 = agent.q1(z, z_goal, action)
    q2 = agent.q2(z, z_goal, action)
    return 0.5 * (((target - q1) ** 2).mean() + ((target - q2) ** 2).mean())


def awr_weights(advantage: torch.Tensor, temperature: float, clip: float) -> torch.Tensor:
    # exp overflow is harmless: it is clipped straight away
    return torch.clamp(torch.exp(advantage / temperature), max=clip)


def policy_loss(agent: "GoalConditionedIQL", z, z_goal, action) -> torch.Tensor:
    with torch.no_grad():
        q = torch.min(agent.q1_target(z, z_goal, action), agent.q2_target(z, z_goal, action))
        weights = awr_weights(q - agent.value(z, z_goal), agent.cfg.awr_temperature, agent.cfg.awr_weight_clip)
    return (weights * -agent.policy.log_prob(z, z_goal, action)).mean()


def normalize_action(action) -> torch.Tensor:
    a = torch.as_tensor(action)
    return a / torch.as_tensor(E.ACTION_SCALE, dtype=a.dtype)


class GoalConditionedIQL:
    """Encoder plus IQL heads, their target copies and optimisers."""

    def __init__(
        self,
        obs_dim: int = E.OBS_DIM,
        action_dim: int = E.ACTION_DIM,
        cfg: IQLConfig | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        self.cfg = cfg or IQLConfig()
        self.cfg.validate()
        self.obs_dim, self.action_dim = obs_dim, action_dim
        hidden = (self.cfg.hidden, self.cfg.hidden)
        torch.manual_seed(seed)
        z = self.cfg.latent_dim
        self.encoder = StateEncoder(obs_dim, z, hidden).to(dtype)
        self.policy = GaussianPolicy(z, action_dim, hidden).to(dtype)
        self.q1 = QNetwork(z, action_dim, hidden).to(dtype)
        self.q2 = QNetwork(z, action_dim, hidden).to(dtype)
        self.value = ValueNetwork(z, hidden).to(dtype)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for net in (self.q1_target, self.q2_target):
            net.requires_grad_(False)
        self.dtype = dtype
        self.generator = torch.Generator().manual_seed(seed + 1)
        lr = self.cfg.learning_rate
        self.encoder_opt = torch.optim.Adam(self.encoder.parameters(), lr=lr)
        self.head_opt = torch.optim.Adam(
            [*self.policy.parameters(), *self.q1.parameters(), *self.q2.parameters(), *self.value.parameters()],
            lr=lr,
        )
        self.n_updates = 0

    def modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "policy": self.policy,
            "q1": self.q1,
            "q2": self.q2,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
            "value": self.value,
        }

    def _tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def encode_batch(self, obs, sample: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """Latents for a batch of observations; returns (z, per-row KL to the prior)."""
        post = self.encoder(obs)
        kl = kl_standard_normal(post)
        if not sample:
            return post.mean, kl
        noise = torch.randn(post.mean.shape, generator=self.generator, dtype=self.dtype)
        return post.mean + post.log_std.exp() * noise, kl

    def losses(self, batch, phase: Phase = Phase.PRETRAIN, reward=None, done=None):
        """All loss terms for one batch (with the autograd graph attached)."""
        obs = self._tensor(batch.obs)
        nxt = self._tensor(batch.next_obs)
        goal = self._tensor(batch.goal_obs)
        action = normalize_action(self._tensor(batch.action))
        reward = self._tensor(batch.reward if reward is None else reward)
        done = self._tensor(batch.done if done is None else done)
        n = len(obs)
        with torch.set_grad_enabled(phase == Phase.PRETRAIN and torch.is_grad_enabled()):
            # one encoder pass for state, goal and next state
            z_all, kl_all = self.encode_batch(torch.cat([obs, goal, nxt]))
        if phase == Phase.FINETUNE:
            z_all, kl_all = z_all.detach(), kl_all.detach()
        z, z_goal, z_next = z_all[:n], z_all[n:2 * n], z_all[2 * n:]
        lv = value_loss(self, z, z_goal, action)
        lq = q_loss(self, z, z_goal, action, reward, z_next.detach(), done)
        lp = policy_loss(self, z, z_goal, action)
        kl_state = kl_all[:n].mean()
        kl_goal = kl_all[n:2 * n].mean()
        rl = lv + lq + lp
        total = rl + self.cfg.alpha_vib * (kl_state + kl_goal) if phase == Phase.PRETRAIN else rl
        return {"value": lv, "q": lq, "policy": lp, "kl_state": kl_state, "kl_goal": kl_goal, "rl": rl, "total": total}

    def train_step(self, batch, phase: Phase = Phase.PRETRAIN, reward=None, done=None) -> LossReport:
        phase = Phase(phase)
        terms = self.losses(batch, phase, reward, done)
        report = LossReport(
            value_loss=terms["value"].item(),
            q_loss=terms["q"].item(),
            policy_loss=terms["policy"].item(),
            kl_state=terms["kl_state"].item(),
            kl_goal=terms["kl_goal"].item(),
            rl_loss=terms["rl"].item(),
            total_loss=terms["total"].item(),
        )
        if not math.isfinite(report.total_loss):
            raise NonFiniteLossError(f"non-finite loss at update {self.n_updates}", report.as_dict())
        self.head_opt.zero_grad(set_to_none=True)
        self.encoder_opt.zero_grad(set_to_none=True)
        terms["total"].backward()
        self.head_opt.step()
        if phase == Phase.PRETRAIN:
            self.encoder_opt.step()
        polyak_update(self.q1_target, self.q1, self.cfg.polyak_rate)
        polyak_update(self.q2_target, self.q2, self.cfg.polyak_rate)
        self.n_updates += 1
        return report

    # -- inference ----------------------------------------------------------------

    @torch.no_grad()
    def latent(self, obs, sample: bool = False) -> torch.Tensor:
        post = self.encoder.encode(obs)
        if not sample:
            return post.mean
        noise = torch.randn(post.mean.shape, generator=self.generator, dtype=self.dtype)
        return post.mean + post.log_std.exp() * noise

    @torch.no_grad()
    def value_of(self, z, z_goal) -> torch.Tensor:
        return self.value(torch.as_tensor(z, dtype=self.dtype), torch.as_tensor(z_goal, dtype=self.dtype))

    @torch.no_grad()
    def act(self, obs, goal_latent, deterministic: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
        """Environment-unit action for one observation and a goal latent."""
        z = self.encoder.encode(obs).mean
        if not deterministic:
            post = self.encoder.encode(obs)
            rng = rng or np.random.default_rng()
            z = post.mean + post.std * self._tensor(rng.standard_normal(post.mean.shape))
        mean, log_std = self.policy(z, torch.as_tensor(goal_latent, dtype=self.dtype))
        a = mean.numpy().astype(float)
        if not deterministic:
            a = a + np.exp(log_std.numpy()) * rng.standard_normal(a.shape)
        a = np.clip(a, -1.0, 1.0) * E.ACTION_SCALE
        return E.clamp_action(a)
