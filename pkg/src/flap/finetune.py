"""Online fine-tuning guided by planned latent subgoals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from flap import env as E
from flap.dataset import RelabelConfig, Trajectory, TrajectoryBuffer, mix_batch
from flap.errors import CalibrationError, ConfigError, PlanningError
from flap.gcrl import GoalConditionedIQL, Phase
from flap.nets import parameter_bytes

log = logging.getLogger(__name__)

# (obs_0, goal_obs, rng) -> (executed subgoal latents (K, Z), plan cost)
PlanFn = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, float]]


@dataclass
class FinetuneConfig:
    h: int = 25
    eps_cos: float = 0.97
    reach_dist: float = 0.5
    episodes_per_epoch: int = 5
    n_epochs: int = 40
    gradient_steps: int = 100
    eval_episodes: int = 10
    batch_size: int = 128
    offline_fraction: float = 0.6
    online_ground_truth_fraction: float = 0.3
    reward_below_threshold: bool = False  # literal "< eps" indicator, for fidelity experiments

    def validate(self) -> None:
        if self.h < 1:
            raise ConfigError("h must be >= 1")
        if not -1.0 < self.eps_cos < 1.0:
            raise ConfigError("eps_cos must lie in (-1, 1)")
        if self.reach_dist < 0:
            raise ConfigError("reach_dist must be non-negative")
        if min(self.episodes_per_epoch, self.n_epochs, self.gradient_steps, self.eval_episodes) < 0:
            raise ConfigError("episode / epoch / step counts must be non-negative")


def cosine_similarity(z_t, z_g) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=float)
    z_g = np.asarray(z_g, dtype=float)
    nt = np.linalg.norm(z_t, axis=-1)
    ng = np.linalg.norm(z_g, axis=-1)
    if np.any(nt == 0) or np.any(ng == 0):
        raise ValueError("cosine similarity of a zero-norm latent is undefined")
    return (z_t * z_g).sum(-1) / (nt * ng)


def latent_reward(z_t, z_g, eps_cos: float, below_threshold: bool = False):
    """0 when the latents point the same way (cosine >= eps_cos), else -1.

    Works on single vectors or on batches along the last axis.
    """
    cos = cosine_similarity(z_t, z_g)
    hit = cos < eps_cos if below_threshold else cos >= eps_cos
    out = np.where(hit, 0.0, -1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class SubgoalTracker:
    z_seq: np.ndarray  # (K, Z) executed subgoals, last one is the final goal
    h: int
    reach_dist: float
    active_index: int = 0
    steps_on_current: int = 0
    history: list[int] = field(default_factory=list)


def current_goal(tracker: SubgoalTracker, z_t) -> np.ndarray:
    """Advance on reach or when the step budget is spent, then return the active subgoal."""
    last = len(tracker.z_seq) - 1
    reached = np.linalg.norm(np.asarray(z_t) - tracker.z_seq[tracker.active_index]) <= tracker.reach_dist
    if reached or tracker.steps_on_current >= tracker.h:
        tracker.active_index = min(tracker.active_index + 1, last)
        tracker.steps_on_current = 0
    tracker.steps_on_current += 1
    tracker.history.append(tracker.active_index)
    return tracker.z_seq[tracker.active_index]


@dataclass
class EpisodeResult:
    trajectory: Trajectory | None
    success: bool
    plan_cost: float = float("nan")
    subgoal_history: list[int] = field(default_factory=list)


def run_episode(
    env: E.TabletopEnv,
    task: E.TaskSpec,
    agent: GoalConditionedIQL,
    plan_fn: PlanFn,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
    seed: int,
    deterministic: bool = False,
) -> EpisodeResult:
    """Plan once from (z_0, z_g), then follow the subgoals until the step budget runs out."""
    obs = env.reset(task, seed)
    goal_obs = task.goal_observation().astype(np.float32)
    try:
        z_seq, cost = plan_fn(obs.astype(np.float32), goal_obs, rng)
    except PlanningError as exc:
        log.warning("planning failed, episode counted as failure: %s", exc)
        return EpisodeResult(None, False)
    tracker = SubgoalTracker(np.asarray(z_seq, dtype=np.float32), cfg.h, cfg.reach_dist)
    observations = [obs]
    actions = []
    while not env.done:
        z_t = agent.latent(obs.astype(np.float32)).numpy()
        goal = current_goal(tracker, z_t)
        a = agent.act(obs.astype(np.float32), goal, deterministic=deterministic, rng=rng)
        obs = env.step(a)
        observations.append(obs)
        actions.append(a)
    traj = Trajectory(
        np.array(observations), np.array(actions), scene_id=task.scene.scene_id, goal_obs=goal_obs
    )
    return EpisodeResult(traj, env.success(), cost, tracker.history)


def relabeled_rewards(agent: GoalConditionedIQL, batch, cfg: FinetuneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Latent-similarity rewards against each transition's goal; done marks reward 0."""
    with torch.no_grad():
        z_next = agent.latent(batch.next_obs).numpy()
        z_goal = agent.latent(batch.goal_obs).numpy()
    r = latent_reward(z_next, z_goal, cfg.eps_cos, cfg.reward_below_threshold).astype(np.float32)
    return r, (r == 0.0).astype(np.float32)


def evaluate(
    agent: GoalConditionedIQL,
    task: E.TaskSpec,
    plan_fn: PlanFn,
    cfg: FinetuneConfig,
    n_episodes: int,
    seed_base: int = 10_000,
) -> tuple[float, float]:
    """Deterministic-policy success rate over fixed reset seeds; (rate, mean plan cost)."""
    if n_episodes == 0:
        return float("nan"), float("nan")
    env = E.TabletopEnv()
    wins, costs = 0, []
    for i in range(n_episodes):
        rng = np.random.default_rng([seed_base, i])
        res = run_episode(env, task, agent, plan_fn, cfg, rng, seed_base + i, deterministic=True)
        wins += res.success
        costs.append(res.plan_cost)
    return wins / n_episodes, float(np.nanmean(costs)) if np.any(np.isfinite(costs)) else float("nan")


def finetune_loop(
    offline_buf: TrajectoryBuffer,
    online_buf: TrajectoryBuffer,
    agent: GoalConditionedIQL,
    task: E.TaskSpec,
    plan_fn: PlanFn,
    cfg: FinetuneConfig,
    seed: int = 0,
    frozen_modules: dict | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Alternate exploration episodes and frozen-encoder IQL updates.

    Row 0 is the evaluation of the pre-trained policy; row e the evaluation
    after e epochs. Each epoch adds ``episodes_per_epoch`` trajectories to
    ``online_buf`` and runs ``gradient_steps`` updates on mixed batches.
    """
    cfg.validate()
    frozen = dict(frozen_modules or {})
    frozen["encoder"] = agent.encoder
    fingerprints = {name: parameter_bytes(m) for name, m in frozen.items()}
    agent.encoder.freeze()
    rng = np.random.default_rng([seed, 0xF1])
    env = E.TabletopEnv()
    offline_cfg = RelabelConfig(0.0)
    online_cfg = RelabelConfig(cfg.online_ground_truth_fraction)
    rows = []
    rate, _ = evaluate(agent, task, plan_fn, cfg, cfg.eval_episodes)
    rows.append(_row(0, rate, {}, float("nan")))
    if on_epoch:
        on_epoch(rows[-1])
    for epoch in range(1, cfg.n_epochs + 1):
        costs = []
        for k in range(cfg.episodes_per_epoch):
            ep_seed = seed * 1_000_003 + epoch * 101 + k
            res = run_episode(env, task, agent, plan_fn, cfg, rng, ep_seed, deterministic=False)
            if res.trajectory is not None:
                online_buf.add(res.trajectory)
            costs.append(res.plan_cost)
        sums: dict[str, float] = {}
        for _ in range(cfg.gradient_steps):
            batch = mix_batch(
                offline_buf, online_buf, cfg.batch_size, rng, offline_cfg, online_cfg, cfg.offline_fraction
            )
            reward, done = relabeled_rewards(agent, batch, cfg)
            report = agent.train_step(batch, Phase.FINETUNE, reward=reward, done=done)
            for key, value in report.as_dict().items():
                sums[key] = sums.get(key, 0.0) + value
        means = {k: v / cfg.gradient_steps for k, v in sums.items()} if cfg.gradient_steps else {}
        rate, _ = evaluate(agent, task, plan_fn, cfg, cfg.eval_episodes)
        plan_cost = float(np.nanmean(costs)) if np.any(np.isfinite(costs)) else float("nan")
        rows.append(_row(epoch, rate, means, plan_cost))
        if on_epoch:
            on_epoch(rows[-1])
    for name, module in frozen.items():
        if parameter_bytes(module) != fingerprints[name]:
            raise AssertionError(f"{name} parameters changed during fine-tuning")
    return rows


def _row(epoch: int, rate: float, means: dict, plan_cost: float) -> dict:
    nan = float("nan")
    return {
        "epoch": epoch,
        "success_rate": rate,
        "value_loss": means.get("value_loss", nan),
        "q_loss": means.get("q_loss", nan),
        "policy_loss": means.get("policy_loss", nan),
        "mean_kl": means.get("mean_kl", nan),
        "plan_cost": plan_cost,
    }


def calibrate_eps_cos(agent: GoalConditionedIQL, buffer: TrajectoryBuffer, rng: np.random.Generator,
                      n_pairs: int = 10_000, percentile: float = 90.0) -> float:
    """Percentile of cos(z_t, z_{t+1}) over offline successor pairs."""
    if buffer.n_transitions < 100:
        raise CalibrationError("need at least 100 offline transitions")
    a, b = buffer.successor_pairs(n_pairs, 1, rng)
    with torch.no_grad():
        cos = cosine_similarity(agent.latent(a).numpy(), agent.latent(b).numpy())
    return float(np.percentile(cos, percentile))


def calibrate_reach_dist(agent: GoalConditionedIQL, buffer: TrajectoryBuffer, rng: np.random.Generator,
                         n_pairs: int = 10_000, percentile: float = 5.0) -> float:
    """Percentile of latent distances between two posterior samples of the same observation."""
    if buffer.n_transitions < 100:
        raise CalibrationError("need at least 100 offline transitions")
    obs, _ = buffer.successor_pairs(n_pairs, 0, rng)
    with torch.no_grad():
        d = torch.linalg.vector_norm(agent.latent(obs, sample=True) - agent.latent(obs, sample=True), dim=-1)
    return float(np.percentile(d.numpy(), percentile))
