import math

import numpy as np
import pytest
import torch

from flap.encoder import StateEncoder, kl_to_standard_normal, sample_latent
from flap.nets import LOG_STD_MAX, LOG_STD_MIN, GaussianLatent
from oracles import central_difference_check, mc_kl_diag_gaussians


def test_encode_deterministic():
    enc = StateEncoder(16, 16)
    x = np.random.default_rng(0).standard_normal((5, 16))
    a, b = enc.encode(x), enc.encode(x)
    assert torch.equal(a.mean, b.mean) and torch.equal(a.log_std, b.log_std)


def test_zero_heads_output_bias():
    enc = StateEncoder(16, 4)
    enc.net.zero_heads()
    with torch.no_grad():
        enc.net.mean_head.bias.copy_(torch.tensor([1.0, -2.0, 0.5, 0.0]))
        enc.net.log_std_head.bias.copy_(torch.tensor([0.1, 0.2, -0.3, 0.0]))
    out = enc.encode(np.random.default_rng(1).standard_normal((3, 16)))
    assert torch.allclose(out.mean, torch.tensor([1.0, -2.0, 0.5, 0.0]).expand(3, 4))
    assert torch.allclose(out.log_std, torch.tensor([0.1, 0.2, -0.3, 0.0]).expand(3, 4))


def test_log_std_clamped():
    enc = StateEncoder(4, 3)
    with torch.no_grad():
        enc.net.log_std_head.bias.fill_(50.0)
    assert enc.encode(np.zeros(4)).log_std.max().item() == LOG_STD_MAX
    with torch.no_grad():
        enc.net.log_std_head.bias.fill_(-50.0)
    assert enc.encode(np.zeros(4)).log_std.min().item() == LOG_STD_MIN


def test_encode_rejects_nan_and_bad_dims():
    enc = StateEncoder(4, 3)
    with pytest.raises(ValueError):
        enc.encode(np.array([0.0, np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        enc.encode(np.zeros(5))


def test_encoder_output_gradients_match_finite_differences():
    torch.manual_seed(0)
    enc = StateEncoder(5, 3, hidden=(8, 8)).double()
    x = torch.randn(4, 5, dtype=torch.float64)
    w = torch.randn(4, 3, dtype=torch.float64)
    for head in ("mean", "log_std"):
        err, n = central_difference_check(lambda: (getattr(enc(x), head) * w).sum(), list(enc.parameters()))
        assert n > 100 and err <= 1e-4, (head, err)


def test_sample_latent_examples():
    gl = GaussianLatent(torch.tensor([1.0, 2.0]), torch.tensor([0.3, -0.2]))
    assert torch.equal(sample_latent(gl, torch.zeros(2)), gl.mean)
    unit = GaussianLatent(torch.tensor([1.0, 2.0]), torch.zeros(2))
    assert torch.equal(sample_latent(unit, torch.tensor([1.0, 0.0])), torch.tensor([2.0, 2.0]))


def test_sample_latent_empirical_std():
    log_std = torch.tensor([-1.0, 0.0, 0.7], dtype=torch.float64)
    gl = GaussianLatent(torch.zeros(3, dtype=torch.float64), log_std)
    noise = torch.as_tensor(np.random.default_rng(0).standard_normal((100_000, 3)))
    emp = sample_latent(gl, noise).std(0)
    assert torch.all(torch.abs(emp / log_std.exp() - 1) < 0.02)


def test_kl_examples():
    z = torch.zeros(16)
    assert kl_to_standard_normal(GaussianLatent(z, z)).item() == 0.0
    one = kl_to_standard_normal(GaussianLatent(torch.tensor([1.0]), torch.tensor([0.0]))).item()
    assert one == pytest.approx(0.5, abs=1e-12)
    two = kl_to_standard_normal(GaussianLatent(z.double(), torch.full((16,), math.log(2.0), dtype=torch.float64)))
    assert two.item() == pytest.approx(16 * 0.5 * (4 - 1 - 2 * math.log(2)), abs=1e-9)
    assert two.item() == pytest.approx(12.9096, abs=1e-4)


def test_kl_unit_case_monte_carlo():
    est, se = mc_kl_diag_gaussians([1.0], [1.0], [0.0], [1.0], 2_000_000, np.random.default_rng(0))
    assert abs(est - 0.5) < 1e-3


def test_kl_non_negative_random():
    rng = np.random.default_rng(0)
    mean = torch.as_tensor(rng.normal(0, 2, (10_000, 16)))
    log_std = torch.as_tensor(rng.uniform(LOG_STD_MIN, LOG_STD_MAX, (10_000, 16)))
    assert torch.all(kl_to_standard_normal(GaussianLatent(mean, log_std)) >= 0)


def test_freeze_stops_gradients():
    enc = StateEncoder(4, 3)
    enc.freeze()
    assert not any(p.requires_grad for p in enc.parameters())
