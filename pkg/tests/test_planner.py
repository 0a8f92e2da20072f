import math

import numpy as np
import pytest
import torch

from flap import planner as P
from flap.dataset import Trajectory, TrajectoryBuffer
from flap.errors import CalibrationError, ConfigError, PlanningError
from oracles import std_normal_log_density

Z = 3


def const_value(v):
    return lambda a, b: torch.full(a.shape[:-1], float(v))


def goal_decoder(z_goal):
    # lands on the goal whatever the code: ẑ_k = z_g for every k
    return lambda z, u: z_goal.expand(*u.shape[:-1], z_goal.shape[-1]).clone()


def test_rollout_definition_and_determinism():
    W = torch.randn(Z + 8, Z)
    dec = lambda z, u: torch.tanh(torch.cat([z, u], -1) @ W)
    z0, u = torch.randn(Z), torch.randn(4, 8)
    a, b = P.rollout(dec, z0, u), P.rollout(dec, z0, u)
    assert torch.equal(a, b)
    assert torch.equal(a[0], dec(z0, u[0]))
    assert torch.equal(a[2], dec(a[1], u[2]))
    assert P.rollout(dec, z0, torch.zeros(0, 8)).shape == (0, Z)


def test_prior_only_cost():
    zg = torch.tensor([0.2, -0.1, 0.5])
    cfg = P.PlannerConfig()
    cost, terms = P.plan_cost(torch.zeros(Z), zg, torch.zeros(4, 8), goal_decoder(zg), const_value(-10.0), cfg)
    expected = 0.1 * 4 * (4 * math.log(2 * math.pi))
    assert expected == pytest.approx(2.9406, abs=1e-4)
    assert cost.item() == pytest.approx(expected, abs=1e-6)
    assert terms["terminal_distance"].item() == 0.0
    assert terms["hinge_low"].item() == 0.0 and terms["hinge_high"].item() == 0.0


def test_hinge_arithmetic():
    zg = torch.zeros(Z)
    cfg = P.PlannerConfig()
    values = iter([cfg.v_min - 2.0])

    def value_fn(a, b):
        v = torch.full(a.shape[:-1], -10.0)
        v[..., 0] = next(values)
        return v

    cost, terms = P.plan_cost(torch.zeros(Z), zg, torch.zeros(4, 8), goal_decoder(zg), value_fn, cfg)
    assert terms["hinge_low"].item() == pytest.approx(2.0, abs=1e-6)
    assert cost.item() == pytest.approx(2.0 + 0.4 * 4 * math.log(2 * math.pi), abs=1e-6)
    _, terms = P.plan_cost(torch.zeros(Z), zg, torch.zeros(4, 8), goal_decoder(zg), const_value(cfg.v_max + 0.5), cfg)
    assert terms["hinge_high"].item() == pytest.approx(4 * 0.5, abs=1e-6)


def test_cost_decomposition_and_prior_oracle():
    rng = np.random.default_rng(0)
    W = torch.as_tensor(rng.standard_normal((Z + 8, Z)), dtype=torch.float64)
    dec = lambda z, u: z + 0.3 * torch.tanh(torch.cat([z, u], -1) @ W)
    val = lambda a, b: -5.0 * (b - a).norm(dim=-1) - 1.0
    cfg = P.PlannerConfig(v_min=-4.0, v_max=-1.5)
    u = torch.as_tensor(rng.standard_normal((64, 4, 8)))
    z0, zg = torch.as_tensor(rng.standard_normal(Z)), torch.as_tensor(rng.standard_normal(Z))
    cost, terms = P.plan_cost(z0, zg, u, dec, val, cfg)
    assert torch.allclose(cost, sum(terms.values()), atol=1e-9, rtol=0)
    for j in range(5):
        ref = -0.1 * sum(std_normal_log_density(u[j, k].numpy()) for k in range(4))
        assert terms["prior_penalty"][j].item() == pytest.approx(ref, abs=1e-9)


def test_terminal_distance_uses_pre_replacement_rollout():
    zg = torch.tensor([1.0, 0.0, 0.0])
    dec = lambda z, u: z + 0.1
    rng = np.random.default_rng(0)
    plan = P.mppi_plan(np.zeros(Z), zg.numpy(), P.PlannerConfig(n_samples=32), rng, dec, const_value(-10.0))
    assert np.array_equal(plan.z_seq[-1], zg.numpy())
    expected = np.linalg.norm(zg.numpy() - plan.z_rollout[-1])
    assert plan.cost_terms["terminal_distance"] == pytest.approx(expected, abs=1e-6)
    assert plan.cost == pytest.approx(sum(plan.cost_terms.values()), abs=1e-5)


def test_mppi_surrogate_convergence():
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        u_star = torch.as_tensor(rng.normal(0, 0.5, (1, 8)), dtype=torch.float32)
        cfg = P.PlannerConfig(K=1, temperature=0.01)
        plan = P.mppi_plan(np.zeros(2), np.zeros(2), cfg, np.random.default_rng(100 + seed),
                           cost_fn=lambda u: ((u - u_star) ** 2).sum((-1, -2)))
        errs.append(np.abs(plan.mean_u_seq - u_star.numpy()).max())
        h = plan.best_cost_history
        assert len(h) == 6 and all(b <= a for a, b in zip(h, h[1:]))
    assert max(errs) <= 0.05


def test_best_ever_cost_not_above_initial_draw():
    u_star = torch.full((4, 8), 0.7)
    cost_fn = lambda u: ((u - u_star) ** 2).sum((-1, -2))
    cfg = P.PlannerConfig(temperature=1e-6)
    plan = P.mppi_plan(np.zeros(2), np.zeros(2), cfg, np.random.default_rng(0), cost_fn=cost_fn)
    first = cost_fn(torch.as_tensor(np.random.default_rng(0).standard_normal((1024, 4, 8)), dtype=torch.float32))
    assert plan.cost <= first.min().item()
    assert plan.cost == pytest.approx(cost_fn(torch.as_tensor(plan.u_seq)).item(), rel=1e-6)


def test_mppi_determinism():
    zg = torch.tensor([0.5, 0.5, -0.5])
    W = torch.randn(Z + 8, Z, generator=torch.Generator().manual_seed(0))
    dec = lambda z, u: z + 0.2 * torch.tanh(torch.cat([z, u], -1) @ W)
    val = lambda a, b: -3.0 * (b - a).norm(dim=-1)
    cfg = P.PlannerConfig(n_samples=256, v_min=-2.0, v_max=-0.1)
    a = P.mppi_plan(np.zeros(Z), zg.numpy(), cfg, np.random.default_rng(4), dec, val)
    b = P.mppi_plan(np.zeros(Z), zg.numpy(), cfg, np.random.default_rng(4), dec, val)
    assert a.as_text() == b.as_text()
    assert np.array_equal(a.u_seq, b.u_seq)


def test_all_non_finite_costs_raise():
    with pytest.raises(PlanningError):
        P.mppi_plan(np.zeros(2), np.zeros(2), P.PlannerConfig(n_samples=8), np.random.default_rng(0),
                    cost_fn=lambda u: torch.full(u.shape[:1], float("nan")))


def test_config_validation():
    with pytest.raises(ConfigError):
        P.PlannerConfig(n_iters=4).validate()
    with pytest.raises(ConfigError):
        P.PlannerConfig(v_min=-5.0, v_max=-5.0).validate()
    with pytest.raises(ConfigError):
        P.PlannerConfig(v_min=-5.0, v_max=1.0).validate()


def _buffer(n_traj=20, length=40):
    rng = np.random.default_rng(0)
    return TrajectoryBuffer([Trajectory(rng.standard_normal((length + 1, 4)), np.zeros((length, 4)))
                             for _ in range(n_traj)])


def test_calibration_percentiles_and_degenerate_value():
    buf = _buffer()
    enc = lambda x: type("G", (), {"mean": x})()
    lo, hi = P.calibrate_value_bounds(buf, lambda a, b: -(b - a).norm(dim=-1), enc, 25)
    assert lo <= hi
    lo_c, hi_c = P.calibrate_value_bounds(buf, lambda a, b: torch.full(a.shape[:-1], -5.0), enc, 25)
    assert lo_c == hi_c == -5.0
    with pytest.raises(ConfigError):
        P.PlannerConfig(v_min=lo_c, v_max=hi_c).validate()


def test_calibration_needs_enough_pairs():
    with pytest.raises(CalibrationError):
        P.calibrate_value_bounds(_buffer(n_traj=2, length=40), const_value(-1.0), lambda x: x, 25)
