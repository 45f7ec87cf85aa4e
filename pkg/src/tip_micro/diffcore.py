"""Text-to-image prior: noise schedule, compact autoencoder, denoising
U-Net with semantic cross-attention, and the noise-prediction objective.

The U-Net runs at three resolutions on the 16x16 latent grid and exposes
its encoder skip features so the restoration adaptor can modulate them.
After pretraining the whole backbone (autoencoder, U-Net, text encoder) is
frozen and checksummed; adaptor training must leave it bit-identical.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig, TextConfig
from .errors import FrozenParameterError, ModelError, ScheduleError, TrainingDivergedError
from .textenc import TextEncoder, sinusoidal_positions


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Linear-beta DDPM schedule with cumulative alpha products."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: torch.Tensor = field(init=False)
    alphas_bar: torch.Tensor = field(init=False)

    def __post_init__(self):
        betas = torch.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=torch.float64)
        self.betas = betas.to(torch.float32)
        self.alphas_bar = torch.cumprod(1.0 - betas, dim=0).to(torch.float32)

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.min() < 0 or t.max() >= self.timesteps:
            raise ScheduleError(f"timestep out of range [0, {self.timesteps}): {t}")
        return self.alphas_bar[t]

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "NoiseSchedule":
        return cls(timesteps=cfg.timesteps, beta_start=cfg.beta_start, beta_end=cfg.beta_end)


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward marginal z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    abar = schedule.alpha_bar(t).to(z0.dtype)
    while abar.dim() < z0.dim():
        abar = abar[..., None]
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


# ---------------------------------------------------------------------------
# Autoencoder
# ---------------------------------------------------------------------------


class VAE(nn.Module):
    """Compact stride-4 convolutional autoencoder with latent whitening.

    ``latent_shift``/``latent_scale`` are calibrated after reconstruction
    training so diffusion sees roughly unit-variance latents.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        w = cfg.ae_base_width
        c = cfg.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, c, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        self.register_buffer("latent_shift", torch.zeros(c))
        self.register_buffer("latent_scale", torch.ones(c))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Image (B,3,H,W) in [0,1] -> whitened latent (B,c,H/4,W/4)."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ModelError(f"expected (B,3,H,W) image batch, got {tuple(x.shape)}")
        z = self.encoder(x * 2.0 - 1.0)
        return (z - self.latent_shift[None, :, None, None]) / self.latent_scale[None, :, None, None]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent -> image in [0,1] (clamped)."""
        raw = z * self.latent_scale[None, :, None, None] + self.latent_shift[None, :, None, None]
        x = self.decoder(raw)
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0)

    def decode_unclamped(self, z: torch.Tensor) -> torch.Tensor:
        raw = z * self.latent_scale[None, :, None, None] + self.latent_shift[None, :, None, None]
        return (self.decoder(raw) + 1.0) / 2.0

    @torch.no_grad()
    def calibrate_latents(self, images: torch.Tensor) -> None:
        """Set whitening statistics from a batch of training images."""
        self.latent_shift.zero_()
        self.latent_scale.fill_(1.0)
        z = self.encode(images)
        self.latent_shift.copy_(z.mean(dim=(0, 2, 3)))
        self.latent_scale.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-4))


# ---------------------------------------------------------------------------
# U-Net blocks
# ---------------------------------------------------------------------------


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head cross-attention from a feature map onto a token sequence."""

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x, context, context_mask):
        b, c, h, w = x.shape
        if context.dim() != 3:
            raise ModelError(f"context must be (B,M,d), got {tuple(context.shape)}")
        if context.shape[0] != b:
            raise ModelError("context batch size mismatch")
        q = self.to_q(self.norm(x)).reshape(b, c, h * w).transpose(1, 2)  # B,HW,C
        k = self.to_k(context)  # B,M,C
        v = self.to_v(context)
        scores = q @ k.transpose(1, 2) / math.sqrt(c)  # B,HW,M
        if context_mask is not None:
            scores = scores.masked_fill(~context_mask[:, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, context_dim: int | None):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim)
        self.attn = CrossAttention(cout, context_dim) if context_dim else None

    def forward(self, x, temb, context, context_mask):
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h, context, context_mask)
        return h


def modulate(f_skip: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Fusion rule f_hat = (1 + gamma) * f_skip + beta."""
    if gamma.shape != f_skip.shape and gamma.shape[-2:] != (1, 1):
        raise ModelError(f"fusion shape {tuple(gamma.shape)} does not match skip {tuple(f_skip.shape)}")
    return (1.0 + gamma) * f_skip + beta


class UNetEncoder(nn.Module):
    """Shared trunk: conv_in, three encoder stages, middle block.

    The backbone instantiates it with semantic-context cross-attention; the
    adaptor clones the architecture (with widened input) for restoration
    prompts.
    """

    def __init__(self, in_channels: int, cfg: ModelConfig, context_dim: int):
        super().__init__()
        w = cfg.unet_base_width
        m = cfg.unet_channel_mult
        self.widths = [w * m[0], w * m[1], w * m[2]]
        temb_dim = 4 * w
        self.temb_dim = temb_dim
        self.time_embed = nn.Sequential(nn.Linear(w, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.register_buffer("t_freqs", sinusoidal_positions(cfg.timesteps, w))
        self.conv_in = nn.Conv2d(in_channels, self.widths[0], 3, padding=1)
        self.stage1 = EncoderStage(self.widths[0], self.widths[0], temb_dim, context_dim)
        self.down1 = nn.Conv2d(self.widths[0], self.widths[0], 3, stride=2, padding=1)
        self.stage2 = EncoderStage(self.widths[0], self.widths[1], temb_dim, context_dim)
        self.down2 = nn.Conv2d(self.widths[1], self.widths[1], 3, stride=2, padding=1)
        self.stage3 = EncoderStage(self.widths[1], self.widths[2], temb_dim, None)
        self.mid1 = ResBlock(self.widths[2], self.widths[2], temb_dim)
        self.mid_attn = CrossAttention(self.widths[2], context_dim)
        self.mid2 = ResBlock(self.widths[2], self.widths[2], temb_dim)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_embed(self.t_freqs[t])

    def forward(self, x, temb, context, context_mask):
        """Returns (skip features [16,8,4 scales], middle output)."""
        h0 = self.conv_in(x)
        s1 = self.stage1(h0, temb, context, context_mask)
        s2 = self.stage2(self.down1(s1), temb, context, context_mask)
        s3 = self.stage3(self.down2(s2), temb, context, context_mask)
        m = self.mid1(s3, temb)
        m = self.mid_attn(m, context, context_mask)
        m = self.mid2(m, temb)
        return [s1, s2, s3], m


class UNet(nn.Module):
    """Noise predictor eps(z_t, t, context) exposing per-scale skips."""

    def __init__(self, config: ModelConfig | None = None, text_config: TextConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        tcfg = text_config or TextConfig()
        self.cfg = cfg
        self.encoder = UNetEncoder(cfg.latent_channels, cfg, tcfg.embed_dim)
        w1, w2, w3 = self.encoder.widths
        temb_dim = self.encoder.temb_dim
        self.dec3 = ResBlock(w3 + w3, w3, temb_dim)
        self.dec2 = ResBlock(w3 + w2, w2, temb_dim)
        self.dec1 = ResBlock(w2 + w1, w1, temb_dim)
        self.norm_out = nn.GroupNorm(_groups(w1), w1)
        self.conv_out = nn.Conv2d(w1, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z_t, t, context, context_mask, fusion=None, return_skips: bool = False):
        """Predict noise; ``fusion`` is an optional per-scale (gamma, beta) list
        applied to the skip features before decoding."""
        if z_t.dim() != 4 or z_t.shape[1] != self.cfg.latent_channels:
            raise ModelError(f"bad latent shape {tuple(z_t.shape)}")
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        temb = self.encoder.time_embedding(t)
        skips, m = self.encoder(z_t, temb, context, context_mask)
        up_fusion = None
        if fusion is not None:
            if len(fusion) == 2 * len(skips):
                fusion, up_fusion = fusion[: len(skips)], fusion[len(skips):]
            elif len(fusion) != len(skips):
                raise ModelError(f"fusion has {len(fusion)} scales, expected {len(skips)}")
            skips = [modulate(s, g, b) for s, (g, b) in zip(skips, fusion)]
        s1, s2, s3 = skips
        u3 = self.dec3(torch.cat([m, s3], dim=1), temb)
        if up_fusion is not None:
            u3 = modulate(u3, *up_fusion[0])
        u2 = self.dec2(torch.cat([F.interpolate(u3, scale_factor=2, mode="nearest"), s2], dim=1), temb)
        if up_fusion is not None:
            u2 = modulate(u2, *up_fusion[1])
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), s1], dim=1), temb)
        if up_fusion is not None:
            u1 = modulate(u1, *up_fusion[2])
        eps = self.conv_out(F.silu(self.norm_out(u1)))
        if return_skips:
            return eps, skips
        return eps


def unet_forward(unet: UNet, z_t, t, semantic_embedding, semantic_mask):
    """Backbone noise prediction plus raw skip features."""
    return unet(z_t, t, semantic_embedding, semantic_mask, return_skips=True)


# ---------------------------------------------------------------------------
# Freezing and checksums
# ---------------------------------------------------------------------------


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, order-independent."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Backbone:
    """Frozen prior: autoencoder, denoiser, text encoder, schedule, vocab."""

    vae: VAE
    unet: UNet
    text_encoder: TextEncoder
    schedule: NoiseSchedule
    vocab: "object"
    config: ModelConfig
    text_config: TextConfig
    frozen: bool = False
    checksum: str | None = None

    def modules(self):
        return {"vae": self.vae, "unet": self.unet, "textenc": self.text_encoder}

    def compute_checksum(self) -> str:
        h = hashlib.sha256()
        for name, mod in sorted(self.modules().items()):
            h.update(name.encode())
            h.update(state_checksum(mod).encode())
        return h.hexdigest()

    def assert_frozen(self):
        if not self.frozen:
            raise FrozenParameterError("backbone must be frozen before adaptor use")

    def verify_checksum(self):
        current = self.compute_checksum()
        if current != self.checksum:
            raise FrozenParameterError(
                f"frozen backbone parameters changed: {current} != {self.checksum}"
            )


def freeze(backbone: Backbone) -> Backbone:
    """Disable gradients on every backbone parameter and record a checksum."""
    for mod in backbone.modules().values():
        mod.requires_grad_(False)
        mod.eval()
    backbone.frozen = True
    backbone.checksum = backbone.compute_checksum()
    return backbone


def register_optimizer(params, lr: float, betas=(0.9, 0.99)) -> torch.optim.Adam:
    """Build an optimizer, rejecting any frozen parameter."""
    params = list(params)
    if any(not p.requires_grad for p in params):
        raise FrozenParameterError("refusing to register frozen parameters with an optimizer")
    return torch.optim.Adam(params, lr=lr, betas=betas)


# ---------------------------------------------------------------------------
# Training objectives
# ---------------------------------------------------------------------------


def diffusion_loss(unet: UNet, z0, context, context_mask, schedule: NoiseSchedule, generator=None):
    """Noise-prediction (epsilon-matching) objective on a latent batch."""
    b = z0.shape[0]
    t = torch.randint(0, schedule.timesteps, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = add_noise(z0, t, eps, schedule)
    pred = unet(z_t, t, context, context_mask)
    return F.mse_loss(pred, eps)


def check_finite(loss: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite {what} loss: {loss.item()}")
    return loss
