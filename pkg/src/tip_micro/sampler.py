"""Deterministic DDIM sampling with classifier-free guidance over the
joint model (frozen backbone + restoration adaptor).

The unconditional guidance pass drops only the text conditions (semantic
and restoration prompts become ""); the degraded image stays, since it is
the measurement being restored rather than a generative condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adaptor import Adaptor, tip_forward
from .config import SamplerConfig
from .diffcore import Backbone, NoiseSchedule
from .errors import SamplerError
from .textenc import tokenize


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Guided noise estimate eps_u + w * (eps_c - eps_u).

    The w=0 and w=1 endpoints return the inputs bit-exactly rather than via
    the float arithmetic, so "no guidance" really is the conditional pass.
    """
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def timestep_schedule(num_steps: int, schedule: NoiseSchedule) -> list[int]:
    """Strictly decreasing uniform subset of [0, T) ending at 0."""
    if num_steps < 1:
        raise SamplerError(f"step count must be >= 1, got {num_steps}")
    ts = np.linspace(schedule.timesteps - 1, 0, num=num_steps)
    ts = sorted({int(round(t)) for t in ts}, reverse=True)
    return ts


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """One eta=0 DDIM update from timestep t to t_prev."""
    if t <= t_prev:
        raise SamplerError(f"ddim_step requires t > t_prev, got {t} <= {t_prev}")
    abar_t = schedule.alpha_bar(t).to(z_t.dtype)
    abar_p = schedule.alpha_bar(t_prev).to(z_t.dtype)
    z0_hat = (z_t - (1.0 - abar_t).sqrt() * eps_hat) / abar_t.sqrt()
    return abar_p.sqrt() * z0_hat + (1.0 - abar_p).sqrt() * eps_hat


@dataclass
class TipModels:
    backbone: Backbone
    adaptor: Adaptor


def _embed_prompts(backbone: Backbone, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
    toks = [tokenize(p, backbone.vocab, backbone.text_config.max_tokens) for p in prompts]
    ids = torch.stack([t.ids for t in toks])
    mask = torch.stack([t.mask for t in toks])
    with torch.no_grad():
        emb = backbone.text_encoder(ids)
    return emb, mask


@torch.no_grad()
def restore_batch(
    ys: np.ndarray,
    semantic_prompts: list[str],
    restoration_prompts: list[str],
    models: TipModels,
    config: SamplerConfig | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Restore a batch of degraded images; deterministic given the seed.

    ``ys`` is (B,H,W,3) float in [0,1]; returns an array of the same shape.
    """
    cfg = config or SamplerConfig()
    backbone, adaptor = models.backbone, models.adaptor
    backbone.assert_frozen()
    adaptor.eval()
    schedule = backbone.schedule

    b = ys.shape[0]
    y = torch.from_numpy(np.ascontiguousarray(ys, dtype=np.float32)).permute(0, 3, 1, 2)
    cs_emb, cs_mask = _embed_prompts(backbone, list(semantic_prompts))
    cr_emb, cr_mask = _embed_prompts(backbone, list(restoration_prompts))
    null_emb, null_mask = _embed_prompts(backbone, [""] * b)

    latent_hw = ys.shape[1] // backbone.config.ae_stride
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(b, backbone.config.latent_channels, latent_hw, latent_hw, generator=gen)
    y_uncond = torch.zeros_like(y) if cfg.guide_over_image else y

    ts = timestep_schedule(cfg.steps, schedule)
    for i, t in enumerate(ts):
        eps_c = tip_forward(z, t, y, cs_emb, cs_mask, cr_emb, cr_mask, backbone, adaptor)
        if cfg.guidance == 1.0:
            eps = eps_c
        else:
            eps_u = tip_forward(z, t, y_uncond, null_emb, null_mask, null_emb, null_mask, backbone, adaptor)
            eps = cfg_combine(eps_u, eps_c, cfg.guidance)
        if i + 1 < len(ts):
            z = ddim_step(z, eps, t, ts[i + 1], schedule)
        else:
            # Final step: jump to the clean-latent estimate at t=0.
            abar = schedule.alpha_bar(t).to(z.dtype)
            z = (z - (1.0 - abar).sqrt() * eps) / abar.sqrt()
    out = backbone.vae.decode(z)
    return out.permute(0, 2, 3, 1).numpy()


def restore(
    y: np.ndarray,
    semantic_prompt: str,
    restoration_prompt: str,
    models: TipModels,
    config: SamplerConfig | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Restore one degraded image (H,W,3 float in [0,1])."""
    return restore_batch(y[None], [semantic_prompt], [restoration_prompt], models, config, seed)[0]


@torch.no_grad()
def sample_backbone(
    semantic_prompts: list[str],
    backbone: Backbone,
    config: SamplerConfig | None = None,
    seed: int = 0,
    resolution: int = 64,
) -> np.ndarray:
    """Text-to-image sampling from the backbone alone (no adaptor)."""
    cfg = config or SamplerConfig()
    backbone.assert_frozen()
    schedule = backbone.schedule
    b = len(semantic_prompts)
    cs_emb, cs_mask = _embed_prompts(backbone, semantic_prompts)
    null_emb, null_mask = _embed_prompts(backbone, [""] * b)
    latent_hw = resolution // backbone.config.ae_stride
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(b, backbone.config.latent_channels, latent_hw, latent_hw, generator=gen)
    ts = timestep_schedule(cfg.steps, schedule)
    for i, t in enumerate(ts):
        eps_c = backbone.unet(z, t, cs_emb, cs_mask)
        if cfg.guidance == 1.0:
            eps = eps_c
        else:
            eps_u = backbone.unet(z, t, null_emb, null_mask)
            eps = cfg_combine(eps_u, eps_c, cfg.guidance)
        if i + 1 < len(ts):
            z = ddim_step(z, eps, t, ts[i + 1], schedule)
        else:
            abar = schedule.alpha_bar(t).to(z.dtype)
            z = (z - (1.0 - abar).sqrt() * eps) / abar.sqrt()
    out = backbone.vae.decode(z)
    return out.permute(0, 2, 3, 1).numpy()
