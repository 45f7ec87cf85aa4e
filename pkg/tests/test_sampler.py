import copy

import numpy as np
import pytest
import torch

from tip_micro.adaptor import Adaptor
from tip_micro.config import SamplerConfig
from tip_micro.diffcore import NoiseSchedule, add_noise, freeze
from tip_micro.errors import SamplerError
from tip_micro.sampler import (
    TipModels,
    cfg_combine,
    ddim_step,
    restore,
    restore_batch,
    sample_backbone,
    timestep_schedule,
)


# ---------------------------------------------------------------------------
# guidance arithmetic
# ---------------------------------------------------------------------------


def test_cfg_combine_identities():
    g = torch.Generator().manual_seed(0)
    eu = torch.randn(4, 3, generator=g)
    ec = torch.randn(4, 3, generator=g)
    assert torch.equal(cfg_combine(eu, ec, 1.0), ec)
    assert torch.equal(cfg_combine(eu, ec, 0.0), eu)
    # w=2 extrapolates past the conditional estimate.
    assert torch.allclose(cfg_combine(eu, ec, 2.0), 2 * ec - eu)


def test_cfg_combine_affine_in_w():
    g = torch.Generator().manual_seed(1)
    eu = torch.randn(5, generator=g)
    ec = torch.randn(5, generator=g)
    w1, w2 = 0.7, 2.3
    mid = cfg_combine(eu, ec, (w1 + w2) / 2)
    assert torch.allclose(mid, (cfg_combine(eu, ec, w1) + cfg_combine(eu, ec, w2)) / 2, atol=1e-6)


# ---------------------------------------------------------------------------
# timestep schedule
# ---------------------------------------------------------------------------


def test_timestep_schedule_endpoints_and_order():
    sched = NoiseSchedule(timesteps=1000)
    ts = timestep_schedule(50, sched)
    assert ts[0] == 999
    assert ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert len(ts) == 50


def test_timestep_schedule_degenerate():
    sched = NoiseSchedule(timesteps=100)
    assert timestep_schedule(1, sched) == [99]
    # More requested steps than timesteps collapses duplicates.
    ts = timestep_schedule(500, sched)
    assert ts == list(range(99, -1, -1))
    with pytest.raises(SamplerError):
        timestep_schedule(0, sched)


# ---------------------------------------------------------------------------
# DDIM update
# ---------------------------------------------------------------------------


def test_ddim_step_requires_decreasing_t():
    sched = NoiseSchedule(timesteps=100)
    z = torch.zeros(1, 4, 2, 2)
    with pytest.raises(SamplerError):
        ddim_step(z, z, 5, 5, sched)
    with pytest.raises(SamplerError):
        ddim_step(z, z, 5, 9, sched)


def test_ddim_recovers_clean_latent_with_oracle_noise():
    """If eps_hat is the exact noise, each update lands on the true forward
    marginal of z0 and the chain returns z0 itself."""
    sched = NoiseSchedule(timesteps=1000)
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    ts = timestep_schedule(25, sched)
    z = add_noise(z0, torch.tensor(ts[0]), eps, sched)
    for i, t in enumerate(ts[:-1]):
        z = ddim_step(z, eps, t, ts[i + 1], sched)
        expected = add_noise(z0, torch.tensor(ts[i + 1]), eps, sched)
        assert (z - expected).abs().max() <= 1e-9
    abar = sched.alpha_bar(ts[-1]).to(torch.float64)
    z_final = (z - (1.0 - abar).sqrt() * eps) / abar.sqrt()
    assert (z_final - z0).abs().max() <= 1e-9


# ---------------------------------------------------------------------------
# full restoration loop
# ---------------------------------------------------------------------------


@pytest.fixture()
def tiny_models(tiny_backbone):
    bb = copy.deepcopy(tiny_backbone)
    freeze(bb)
    adaptor = Adaptor(bb.config, bb.text_config)
    adaptor.init_from_backbone(bb.unet)
    return TipModels(backbone=bb, adaptor=adaptor)


def test_restore_shape_range_and_determinism(tiny_models, rng):
    y = rng.random((64, 64, 3)).astype(np.float32)
    cfg = SamplerConfig(steps=4, guidance=2.0)
    a = restore(y, "a red circle on a blue background", "Denoise with sigma 0.12", tiny_models, cfg, seed=5)
    b = restore(y, "a red circle on a blue background", "Denoise with sigma 0.12", tiny_models, cfg, seed=5)
    assert a.shape == (64, 64, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, b)
    c = restore(y, "a red circle on a blue background", "Denoise with sigma 0.12", tiny_models, cfg, seed=6)
    assert not np.array_equal(a, c)


def test_restore_batch_matches_single(tiny_models, rng):
    ys = rng.random((2, 64, 64, 3)).astype(np.float32)
    cfg = SamplerConfig(steps=3, guidance=1.0)
    out = restore_batch(ys, ["", ""], ["Dejpeg", "Dejpeg"], tiny_models, cfg, seed=1)
    assert out.shape == ys.shape


def test_zero_init_adaptor_matches_backbone_sampling(tiny_models, rng):
    """With a fresh adaptor and w=1 the restoration sampler reduces to
    text-to-image sampling from the backbone alone."""
    y = rng.random((1, 64, 64, 3)).astype(np.float32)
    cfg = SamplerConfig(steps=5, guidance=1.0)
    prompt = "a green square on a red background"
    restored = restore_batch(y, [prompt], [""], tiny_models, cfg, seed=7)
    sampled = sample_backbone([prompt], tiny_models.backbone, cfg, seed=7)
    assert np.abs(restored - sampled).max() == 0.0


def test_unfrozen_backbone_rejected(tiny_backbone, rng):
    bb = copy.deepcopy(tiny_backbone)
    bb.frozen = False
    adaptor = Adaptor(bb.config, bb.text_config)
    y = rng.random((64, 64, 3)).astype(np.float32)
    from tip_micro.errors import FrozenParameterError

    with pytest.raises(FrozenParameterError):
        restore(y, "", "", TipModels(backbone=bb, adaptor=adaptor), SamplerConfig(steps=2))
