import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maskadapt.diffusion import (
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    ddpm_step,
    forward_diffuse,
    predict_x0,
    training_loss,
)
from maskadapt.errors import ShapeError

D = torch.float64


def test_default_schedules():
    lin = NoiseSchedule.linear()
    assert lin.T == 1000 and lin.alpha_bars[-1] < 1e-3
    geo = NoiseSchedule.geometric()
    # the short surrogate chain keeps some signal at t = T on purpose
    assert geo.T == 10 and 0 < geo.alpha_bars[-1] < 0.1
    assert torch.all(geo.alpha_bars[1:] < geo.alpha_bars[:-1])
    assert geo.sigmas[0] == 0
    assert torch.allclose(geo.sigmas[1:] ** 2, geo.betas[1:])


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.1, 1.2])
    with pytest.raises(ValueError):
        NoiseSchedule.from_alpha_bars([0.5, 0.6])
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.1], variance="other")


def test_posterior_variance():
    s = NoiseSchedule.geometric(variance="posterior")
    ab, b = s.alpha_bars, s.betas
    expect = (b[1:] * (1 - ab[:-1]) / (1 - ab[1:])).sqrt()
    assert torch.allclose(s.sigmas[1:], expect)


def test_schedule_text_roundtrip(tmp_path):
    s = NoiseSchedule.geometric()
    s.save(tmp_path / "s.tsv")
    back = NoiseSchedule.from_text((tmp_path / "s.tsv").read_text())
    assert torch.equal(back.alphas, s.alphas) and torch.equal(back.alpha_bars, s.alpha_bars)
    assert torch.equal(back.sigmas, s.sigmas)


def test_forward_limits():
    x0, eps = torch.randn(5, dtype=D), torch.randn(5, dtype=D)
    s = NoiseSchedule.from_alpha_bars([1.0, 0.0], validate=False)
    assert torch.equal(forward_diffuse(x0, 1, s, eps), x0)
    assert torch.equal(forward_diffuse(x0, 2, s, eps), eps)


def test_forward_errors():
    s = NoiseSchedule.geometric()
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(3), 0, s, torch.zeros(3))
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(3), 11, s, torch.zeros(3))
    with pytest.raises(ShapeError):
        forward_diffuse(torch.zeros(3), 1, s, torch.zeros(4))


def test_inversion_at_064():
    s = NoiseSchedule.from_alpha_bars([0.64], validate=False)
    x0 = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=D)
    eps = torch.tensor([1.0, 0.5, -0.25, 2.0], dtype=D)
    xt = forward_diffuse(x0, 1, s, eps)
    assert (xt - 0.6 * eps) / 0.8 == pytest.approx(x0.tolist(), abs=1e-15)
    assert torch.allclose(predict_x0(xt, eps, 1, s), x0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 10))
def test_exact_inversion(seed, t):
    s = NoiseSchedule.geometric()
    g = torch.Generator().manual_seed(seed)
    x0, eps = torch.randn(3, 8, generator=g, dtype=D), torch.randn(3, 8, generator=g, dtype=D)
    ab = s.alpha_bars[t - 1]
    xt = forward_diffuse(x0, t, s, eps)
    assert (((xt - (1 - ab).sqrt() * eps) / ab.sqrt()) - x0).abs().max() <= 1e-10


def test_variance_statistic():
    s = NoiseSchedule.geometric()
    g = torch.Generator().manual_seed(0)
    n = 200_000
    for t in (1, 5, 10):
        x0, eps = torch.randn(n, generator=g, dtype=D), torch.randn(n, generator=g, dtype=D)
        var = forward_diffuse(x0, t, s, eps).var().item()
        # standard error of a sample variance of unit Gaussians is sqrt(2 / (n - 1))
        assert abs(var - 1.0) <= 3 * np.sqrt(2 / (n - 1))


def test_ddpm_one_step_round_trip():
    s = NoiseSchedule.geometric()
    x0, eps = torch.randn(6, dtype=D), torch.randn(6, dtype=D)
    xt = forward_diffuse(x0, 1, s, eps)
    assert (ddpm_step(xt, eps, 1, s, z=torch.randn(6, dtype=D)) - x0).abs().max() <= 1e-10


def test_ddpm_degenerate():
    s = NoiseSchedule.geometric()
    x, e = torch.randn(4, dtype=D), torch.randn(4, dtype=D)
    z = torch.zeros(4, dtype=D)
    assert torch.equal(ddpm_step(x, e, 5, s, z=z), ddpm_step(x, e, 5, s, z=z))
    assert torch.count_nonzero(ddpm_step(torch.zeros(4, dtype=D), torch.zeros(4, dtype=D), 5, s, z=z)) == 0
    with pytest.raises(ValueError):
        ddpm_step(x, e, 0, s, z=z)


def oracle_chain(x0, eps, s, step):
    """Run a full reverse chain with a denoiser that knows the true noise."""
    x = forward_diffuse(x0, s.T, s, eps)
    for t in range(s.T, 0, -1):
        x = step(x, eps, t)
    return x


def test_full_chain_sigma_zero():
    base = NoiseSchedule.geometric()
    s = NoiseSchedule(base.alphas, base.alpha_bars, torch.zeros_like(base.sigmas))
    g = torch.Generator().manual_seed(3)
    x0, eps = torch.randn(4, 3, 8, 8, generator=g, dtype=D), torch.randn(4, 3, 8, 8, generator=g, dtype=D)
    t0 = time.perf_counter()
    # deterministic DDIM with the fixed true noise walks straight back to x0
    out = oracle_chain(x0, eps, s, lambda x, e, t: ddim_step(x, e, t, t - 1, s))
    assert (out - x0).abs().max() <= 1e-6
    assert time.perf_counter() - t0 < 1.0


def test_ddpm_chain_with_oracle_noise():
    base = NoiseSchedule.geometric()
    s = NoiseSchedule(base.alphas, base.alpha_bars, torch.zeros_like(base.sigmas))
    g = torch.Generator().manual_seed(4)
    x0 = torch.randn(2, 16, generator=g, dtype=D)
    x = forward_diffuse(x0, s.T, s, torch.randn(2, 16, generator=g, dtype=D))
    for t in range(s.T, 0, -1):
        ab = s.alpha_bars[t - 1]
        true_eps = (x - ab.sqrt() * x0) / (1 - ab).sqrt()
        x = ddpm_step(x, true_eps, t, s, z=torch.zeros_like(x))
    assert (x - x0).abs().max() <= 1e-6


def test_training_loss():
    e = torch.randn(3, 4)
    assert training_loss(e, e) == 0
    assert training_loss(torch.ones(4), torch.zeros(4)) == 1.0
    a, b = torch.randn(2, 5, dtype=D), torch.randn(2, 5, dtype=D)
    loop = sum((float(x) - float(y)) ** 2 for x, y in zip(a.flatten(), b.flatten())) / 10
    assert abs(training_loss(a, b).item() - loop) <= 1e-12
    with pytest.raises(ShapeError):
        training_loss(torch.zeros(3), torch.zeros(4))


@settings(max_examples=50, deadline=None)
@given(w=st.floats(-5, 10), seed=st.integers(0, 999))
def test_cfg_combine(w, seed):
    g = torch.Generator().manual_seed(seed)
    c, u = torch.randn(6, generator=g, dtype=D), torch.randn(6, generator=g, dtype=D)
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    assert torch.allclose(cfg_combine(c, c, w), c, atol=1e-12)
    assert torch.allclose(cfg_combine(c, u, w), u + w * (c - u), atol=1e-12)
    perm = torch.randperm(6, generator=g)
    assert torch.equal(cfg_combine(c[perm], u[perm], w), cfg_combine(c, u, w)[perm])
    with pytest.raises(ShapeError):
        cfg_combine(c, u[:3], w)
