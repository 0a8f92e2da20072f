"""Pre-training, baselines and fine-tuning runs wired together."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from flap import env as E
from flap import planner as P
from flap.affordance import AffordanceConfig, AffordanceModel, AffordanceTrainer
from flap.datagen import DatasetConfig, scene_transforms
from flap.dataset import RelabelConfig, Trajectory, TrajectoryBuffer
from flap.errors import ConfigError
from flap.finetune import (
    FinetuneConfig,
    calibrate_eps_cos,
    calibrate_reach_dist,
    evaluate,
    finetune_loop,
)
from flap.gcrl import GoalConditionedIQL, IQLConfig, Phase
from flap.nets import GaussianLatent

log = logging.getLogger(__name__)


class BaselineKind(str, enum.Enum):
    MODEL_FREE = "MODEL_FREE"
    RAW_SPACE_PLANNER = "RAW_SPACE_PLANNER"
    FLAP = "FLAP"


@dataclass
class PretrainConfig:
    iql_steps: int = 20_000
    affordance_steps: int = 10_000
    raw_affordance_steps: int = 10_000
    raw_obs_std: float = 0.05  # fixed posterior width of the identity "encoder" in raw space
    log_every: int = 100
    calibration_pairs: int = 10_000
    calibrate: bool = True  # overwrite eps_cos / reach_dist / value bounds with calibrated values

    def validate(self) -> None:
        if min(self.iql_steps, self.affordance_steps, self.raw_affordance_steps) < 0:
            raise ConfigError("step counts must be non-negative")
        if self.raw_obs_std <= 0 or self.log_every <= 0:
            raise ConfigError("raw_obs_std and log_every must be positive")


@dataclass
class TaskConfig:
    task_id: str = "C"
    init_sampler_seed: int = 0
    max_steps: int = 100
    success_tol: float = 0.05

    def validate(self) -> None:
        if self.task_id not in {"A", "B", "C"}:
            raise ConfigError(f"unknown task {self.task_id!r}")
        if self.max_steps < 1 or self.success_tol <= 0:
            raise ConfigError("max_steps and success_tol must be positive")


class RawObservationEncoder(nn.Module):
    """Identity 'encoder' so the affordance CVAE can be trained on raw observations."""

    def __init__(self, obs_dim: int, std: float):
        super().__init__()
        self.latent_dim = obs_dim
        self.log_std = math.log(std)

    def forward(self, obs: torch.Tensor) -> GaussianLatent:
        return GaussianLatent(obs, torch.full_like(obs, self.log_std))


@dataclass
class Calibration:
    v_min: float
    v_max: float
    eps_cos: float
    reach_dist: float


@dataclass
class Models:
    agent: GoalConditionedIQL
    affordance: AffordanceModel
    raw_affordance: AffordanceModel
    calibration: Calibration
    loss_curves: list[dict] = field(default_factory=list)

    def clone(self, seed: int = 0) -> "Models":
        """Fresh copy from parameters only (new optimiser state, reseeded sampler)."""
        agent = GoalConditionedIQL(self.agent.obs_dim, self.agent.action_dim, self.agent.cfg, seed)
        for name, module in agent.modules().items():
            module.load_state_dict(self.agent.modules()[name].state_dict())
        aff = AffordanceModel(self.affordance.latent_dim, self.affordance.cfg)
        aff.load_state_dict(self.affordance.state_dict())
        raw = AffordanceModel(self.raw_affordance.latent_dim, self.raw_affordance.cfg)
        raw.load_state_dict(self.raw_affordance.state_dict())
        return Models(agent, aff, raw, Calibration(**vars(self.calibration)), list(self.loss_curves))


def target_task(data_cfg: DatasetConfig, task_cfg: TaskConfig) -> E.TaskSpec:
    scene = scene_transforms(data_cfg)[data_cfg.target_scene_id]
    return E.make_task(task_cfg.task_id, scene, task_cfg.init_sampler_seed, task_cfg.max_steps, task_cfg.success_tol)


def run_pretrain(
    trajs: list[Trajectory],
    iql_cfg: IQLConfig,
    aff_cfg: AffordanceConfig,
    pre_cfg: PretrainConfig,
    planner_cfg: P.PlannerConfig,
    ft_cfg: FinetuneConfig,
    seed: int = 0,
) -> Models:
    """Encoder + IQL jointly, then the latent and raw affordance models on frozen inputs."""
    pre_cfg.validate()
    if not trajs:
        raise ConfigError("empty offline dataset")
    obs_dim = trajs[0].observations.shape[1]
    if obs_dim != E.OBS_DIM:
        raise ConfigError(f"dataset observations have {obs_dim} dims, the environment emits {E.OBS_DIM}")
    buffer = TrajectoryBuffer(trajs)
    rng = np.random.default_rng([seed, 0xB0])
    agent = GoalConditionedIQL(obs_dim, E.ACTION_DIM, iql_cfg, seed)
    agent.encoder.fit_normalizer(buffer.observations)
    relabel = RelabelConfig(0.0)
    curves = []
    acc: dict[str, float] = {}
    t0 = time.perf_counter()
    for step in range(1, pre_cfg.iql_steps + 1):
        report = agent.train_step(buffer.sample(iql_cfg.batch_size, relabel, rng), Phase.PRETRAIN)
        for k, v in report.as_dict().items():
            acc[k] = acc.get(k, 0.0) + v
        if step % pre_cfg.log_every == 0:
            row = {"stage": "iql", "step": step, **{k: v / pre_cfg.log_every for k, v in acc.items()}}
            curves.append(row)
            acc = {}
    log.info("IQL pre-training: %d steps in %.1fs", pre_cfg.iql_steps, time.perf_counter() - t0)

    agent.encoder.freeze()
    affordance = AffordanceModel(iql_cfg.latent_dim, aff_cfg)
    curves += _train_affordance(affordance, agent.encoder, buffer, aff_cfg, pre_cfg.affordance_steps,
                                pre_cfg.log_every, rng, seed, "affordance")
    raw_encoder = RawObservationEncoder(obs_dim, pre_cfg.raw_obs_std)
    raw = AffordanceModel(obs_dim, aff_cfg)
    curves += _train_affordance(raw, raw_encoder, buffer, aff_cfg, pre_cfg.raw_affordance_steps,
                                pre_cfg.log_every, rng, seed + 1, "raw_affordance")
    affordance.freeze()
    raw.freeze()

    calib = Calibration(planner_cfg.v_min, planner_cfg.v_max, ft_cfg.eps_cos, ft_cfg.reach_dist)
    if pre_cfg.calibrate and buffer.n_transitions >= 100:
        crng = np.random.default_rng([seed, 0xCA])
        n = pre_cfg.calibration_pairs
        v_min, v_max = P.calibrate_value_bounds(buffer, agent.value_of, agent.encoder, aff_cfg.delta_t, crng, n)
        if v_min < v_max <= 0:
            calib.v_min, calib.v_max = v_min, v_max
        else:
            log.warning("calibrated value bounds (%.3f, %.3f) invalid; keeping defaults", v_min, v_max)
        eps_cos = calibrate_eps_cos(agent, buffer, crng, n)
        if -1.0 < eps_cos < 1.0:
            calib.eps_cos = eps_cos
        else:
            # a collapsed encoder maps successive states to parallel latents
            log.warning("calibrated eps_cos %.6f outside (-1, 1); keeping default", eps_cos)
        calib.reach_dist = calibrate_reach_dist(agent, buffer, crng, n)
    log.info("calibration: %s", calib)
    return Models(agent, affordance, raw, calib, curves)


def _train_affordance(model, encoder, buffer, cfg, n_steps, log_every, rng, seed, stage) -> list[dict]:
    trainer = AffordanceTrainer(model, encoder, seed)
    curves, acc = [], 0.0
    for step in range(1, n_steps + 1):
        obs_t, obs_tp, _ = buffer.affordance_pairs(cfg.batch_size, cfg.delta_t, rng)
        acc += trainer.step(obs_t, obs_tp)
        if step % log_every == 0:
            curves.append({"stage": stage, "step": step, "elbo_loss": acc / log_every})
            acc = 0.0
    return curves


def planner_config(models: Models, base: P.PlannerConfig) -> P.PlannerConfig:
    cfg = P.PlannerConfig(**vars(base))
    cfg.v_min, cfg.v_max = models.calibration.v_min, models.calibration.v_max
    return cfg


def finetune_config(models: Models, base: FinetuneConfig) -> FinetuneConfig:
    cfg = FinetuneConfig(**vars(base))
    cfg.eps_cos, cfg.reach_dist = models.calibration.eps_cos, models.calibration.reach_dist
    return cfg


def make_plan_fn(models: Models, kind: BaselineKind, planner_cfg: P.PlannerConfig):
    """Subgoal generator for one baseline: (obs_0, goal_obs, rng) -> (z_seq, cost)."""
    kind = BaselineKind(kind)
    agent = models.agent
    pcfg = planner_config(models, planner_cfg)

    if kind == BaselineKind.MODEL_FREE:
        def plan_model_free(obs0, goal_obs, rng):
            return agent.latent(goal_obs).numpy()[None], float("nan")
        return plan_model_free

    if kind == BaselineKind.FLAP:
        def plan_flap(obs0, goal_obs, rng):
            z0, zg = agent.latent(obs0), agent.latent(goal_obs)
            plan = P.mppi_plan(z0, zg, pcfg, rng, models.affordance.decode_mean, agent.value_of)
            return plan.z_seq, plan.cost
        return plan_flap

    def encoded_value(x_prev, x_next):
        return agent.value_of(agent.encoder(x_prev).mean, agent.encoder(x_next).mean)

    def plan_raw(obs0, goal_obs, rng):
        plan = P.mppi_plan(obs0, goal_obs, pcfg, rng, models.raw_affordance.decode_mean, encoded_value)
        z_seq = agent.latent(plan.z_rollout).numpy()
        z_seq[-1] = agent.latent(goal_obs).numpy()
        return z_seq, plan.cost
    return plan_raw


def run_eval(models: Models, task: E.TaskSpec, kind: BaselineKind, planner_cfg: P.PlannerConfig,
             ft_cfg: FinetuneConfig, n_episodes: int, seed_base: int = 10_000) -> float:
    """Deterministic success rate of one baseline; NaN (with a warning) for zero episodes."""
    if n_episodes == 0:
        log.warning("run_eval with n_episodes=0: success rate undefined")
        return float("nan")
    plan_fn = make_plan_fn(models, kind, planner_cfg)
    rate, _ = evaluate(models.agent, task, plan_fn, finetune_config(models, ft_cfg), n_episodes, seed_base)
    return rate


def run_finetune(models: Models, offline: list[Trajectory] | TrajectoryBuffer, task: E.TaskSpec,
                 kind: BaselineKind, planner_cfg: P.PlannerConfig, ft_cfg: FinetuneConfig,
                 seed: int, on_epoch=None) -> list[dict]:
    """Fine-tune a fresh copy of the pre-trained models; returns the per-epoch metric rows."""
    run = models.clone(seed)
    offline_buf = offline if isinstance(offline, TrajectoryBuffer) else TrajectoryBuffer(offline)
    plan_fn = make_plan_fn(run, kind, planner_cfg)
    frozen = {"affordance": run.affordance, "raw_affordance": run.raw_affordance}
    rows = finetune_loop(offline_buf, TrajectoryBuffer(), run.agent, task, plan_fn,
                         finetune_config(run, ft_cfg), seed, frozen, on_epoch)
    for row in rows:
        row["seed"] = seed
        row["method"] = BaselineKind(kind).value
    return rows
