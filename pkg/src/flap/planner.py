"""MPPI over sequences of affordance codes.

A candidate plan is a sequence of K codes u_1..u_K. Rolling it through the
affordance decoder from z_0 gives subgoals z_1..z_K, and the plan is scored by

    ||z_g - z_K|| + sum_k [ eta1 * (v_min - V_k)^+ + eta2 * (V_k - v_max)^+ - eta3 * log p(u_k) ]

where V_k = V(z_{k-1}, z_k) and p is the standard normal density over codes.
The planner is agnostic to the space it plans in: any ``decode_mean`` and
``value_fn`` callables work, which is how the raw-observation baseline reuses it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from flap.errors import CalibrationError, ConfigError, PlanningError
from flap.nets import standard_normal_log_prob

DecodeFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
ValueFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

COST_TERMS = ("terminal_distance", "hinge_low", "hinge_high", "prior_penalty")

# instrumentation: number of mppi_plan invocations in this process
PLAN_CALLS = {"count": 0}


@dataclass
class PlannerConfig:
    K: int = 4
    n_samples: int = 1024
    n_iters: int = 5
    noise_schedule: tuple[float, ...] = (1.0, 0.5, 0.2, 0.1, 0.1)
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 0.1
    temperature: float = 1.0
    v_min: float = -30.0
    v_max: float = -5.0
    u_dim: int = 8

    def validate(self) -> None:
        if len(self.noise_schedule) != self.n_iters:
            raise ConfigError(f"noise_schedule has {len(self.noise_schedule)} entries, n_iters={self.n_iters}")
        if self.K < 1 or self.n_samples < 1 or self.u_dim < 1:
            raise ConfigError("K, n_samples and u_dim must be positive")
        if not self.v_min < self.v_max <= 0.0:
            raise ConfigError(f"need v_min < v_max <= 0, got v_min={self.v_min}, v_max={self.v_max}")
        if self.temperature <= 0:
            raise ConfigError("MPPI temperature must be positive")
        if min(self.eta1, self.eta2, self.eta3) < 0:
            raise ConfigError("cost weights must be non-negative")


@dataclass
class SubgoalPlan:
    u_seq: np.ndarray  # (K, u_dim)
    z_rollout: np.ndarray  # (K, Z) decoded subgoals, as scored
    z_seq: np.ndarray  # (K, Z) executed subgoals: last entry replaced by the final goal
    cost: float
    cost_terms: dict[str, float]
    mean_u_seq: np.ndarray | None = None  # final MPPI sampling mean
    best_cost_history: list[float] = field(default_factory=list)

    def as_text(self) -> str:
        lines = [f"cost = {self.cost:.6f}"]
        lines += [f"{k} = {v:.6f}" for k, v in self.cost_terms.items()]
        lines.append("best_cost_history = " + ", ".join(f"{c:.6f}" for c in self.best_cost_history))
        for k, (u, z) in enumerate(zip(self.u_seq, self.z_seq), 1):
            lines.append(f"u_{k} = " + " ".join(f"{x:.5f}" for x in u))
            lines.append(f"z_{k} = " + " ".join(f"{x:.5f}" for x in z))
        return "\n".join(lines) + "\n"


def rollout(decode_mean: DecodeFn, z0: torch.Tensor, u_seq: torch.Tensor) -> torch.Tensor:
    """Recursive decoder means; ``u_seq`` is (..., K, u_dim), result (..., K, Z)."""
    K = u_seq.shape[-2]
    z = z0.expand(*u_seq.shape[:-2], z0.shape[-1])
    out = []
    for k in range(K):
        z = decode_mean(z, u_seq[..., k, :])
        out.append(z)
    if not out:
        return u_seq.new_zeros((*u_seq.shape[:-2], 0, z0.shape[-1]))
    return torch.stack(out, -2)


def plan_cost(
    z0: torch.Tensor,
    z_goal: torch.Tensor,
    u_seq: torch.Tensor,
    decode_mean: DecodeFn,
    value_fn: ValueFn,
    cfg: PlannerConfig,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Cost of one or many code sequences, with its four additive terms."""
    with torch.no_grad():
        z_seq = rollout(decode_mean, z0, u_seq)
        prev = torch.cat([z0.expand(*z_seq.shape[:-2], 1, z0.shape[-1]), z_seq[..., :-1, :]], -2)
        v = value_fn(prev, z_seq)  # (..., K)
        terms = {
            "terminal_distance": torch.linalg.vector_norm(z_goal - z_seq[..., -1, :], dim=-1),
            "hinge_low": cfg.eta1 * torch.clamp(cfg.v_min - v, min=0.0).sum(-1),
            "hinge_high": cfg.eta2 * torch.clamp(v - cfg.v_max, min=0.0).sum(-1),
            "prior_penalty": -cfg.eta3 * standard_normal_log_prob(u_seq).sum(-1),
        }
    cost = terms["terminal_distance"] + terms["hinge_low"] + terms["hinge_high"] + terms["prior_penalty"]
    return cost, terms


def _softmax_weights(costs: torch.Tensor, temperature: float) -> torch.Tensor:
    finite = torch.isfinite(costs)
    shifted = torch.where(finite, costs - costs[finite].min(), torch.full_like(costs, float("inf")))
    w = torch.exp(-shifted / temperature)
    return w / w.sum()


def mppi_plan(
    z0,
    z_goal,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    decode_mean: DecodeFn | None = None,
    value_fn: ValueFn | None = None,
    cost_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> SubgoalPlan:
    """Optimise a code sequence: one prior draw, then ``n_iters`` refinements.

    Each refinement perturbs the current sampling mean with Gaussian noise of
    scale ``noise_schedule[i]`` and moves the mean to the softmax(-cost / T)
    weighted average of the candidates. The lowest-cost sequence seen at any
    stage is returned. ``cost_fn`` replaces the plan cost (used to test the
    optimiser on surrogate objectives).
    """
    cfg.validate()
    PLAN_CALLS["count"] += 1
    dtype = torch.float32
    z0 = torch.as_tensor(np.asarray(z0), dtype=dtype)
    z_goal = torch.as_tensor(np.asarray(z_goal), dtype=dtype)
    shape = (cfg.n_samples, cfg.K, cfg.u_dim)

    def score(u: torch.Tensor) -> torch.Tensor:
        if cost_fn is not None:
            return cost_fn(u)
        return plan_cost(z0, z_goal, u, decode_mean, value_fn, cfg)[0]

    mean = torch.zeros(cfg.K, cfg.u_dim, dtype=dtype)
    best_u, best_cost = None, float("inf")
    history = []
    scales = (None, *cfg.noise_schedule)
    for scale in scales:
        noise = torch.as_tensor(rng.standard_normal(shape), dtype=dtype)
        samples = noise if scale is None else mean + scale * noise
        costs = score(samples)
        finite = torch.isfinite(costs)
        if not finite.any():
            raise PlanningError("every candidate plan has a non-finite cost")
        j = int(torch.argmin(torch.where(finite, costs, torch.full_like(costs, float("inf")))))
        if costs[j].item() < best_cost:
            best_cost, best_u = costs[j].item(), samples[j].clone()
        history.append(best_cost)
        w = _softmax_weights(costs, cfg.temperature)
        mean = torch.einsum("n,nkd->kd", torch.where(finite, w, torch.zeros_like(w)), torch.nan_to_num(samples))

    if cost_fn is not None:
        z_roll = best_u.new_zeros((cfg.K, 0))
        terms = {k: float("nan") for k in COST_TERMS}
        z_exec = z_roll
    else:
        z_roll = rollout(decode_mean, z0, best_u)
        _, t = plan_cost(z0, z_goal, best_u, decode_mean, value_fn, cfg)
        terms = {k: float(v) for k, v in t.items()}
        z_exec = z_roll.clone()
        z_exec[-1] = z_goal
    return SubgoalPlan(
        u_seq=best_u.numpy(),
        z_rollout=z_roll.numpy(),
        z_seq=z_exec.numpy(),
        cost=best_cost,
        cost_terms=terms,
        mean_u_seq=mean.numpy(),
        best_cost_history=history,
    )


def calibrate_value_bounds(
    offline_buffer,
    value_fn: ValueFn,
    encoder,
    delta_t: int,
    rng: np.random.Generator | None = None,
    n_pairs: int = 10_000,
    percentiles: tuple[float, float] = (10.0, 90.0),
) -> tuple[float, float]:
    """Percentiles of V(z_t, z_{t+delta_t}) over offline pairs, using encoder means."""
    if offline_buffer.n_transitions < 100:
        raise CalibrationError(f"need at least 100 offline pairs, buffer has {offline_buffer.n_transitions}")
    rng = rng or np.random.default_rng(0)
    obs_t, obs_tp, _ = offline_buffer.affordance_pairs(max(n_pairs, 10_000), delta_t, rng)
    with torch.no_grad():
        z_t = encoder(torch.as_tensor(obs_t)).mean
        z_tp = encoder(torch.as_tensor(obs_tp)).mean
        v = value_fn(z_t, z_tp).numpy()
    lo, hi = np.percentile(v, percentiles)
    return float(lo), float(hi)
