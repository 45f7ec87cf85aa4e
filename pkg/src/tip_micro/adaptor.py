"""Trainable restoration branch: degraded-image encoder, a copy of the
backbone U-Net encoder cross-attending to restoration prompts, and
zero-initialized 1x1 fusion producers emitting per-scale (gamma, beta).

At initialization every fusion producer is exactly zero, so the combined
model reproduces the frozen backbone bit for bit; restoration conditioning
is learned purely as a perturbation on top of the prior.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig, TextConfig
from .diffcore import Backbone, UNet, UNetEncoder, modulate
from .errors import ModelError


class CondEncoder(nn.Module):
    """Strided conv stack mapping the degraded image to latent-shaped features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.cond_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] != 3:
            raise ModelError(f"expected (B,3,H,W) degraded image, got {tuple(y.shape)}")
        return self.net(y * 2.0 - 1.0)


class FusionProducer(nn.Module):
    """Zero-initialized 1x1 convolution emitting (gamma, beta)."""

    def __init__(self, cin: int, cout: int, per_channel: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(cin, 2 * cout, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)
        self.per_channel = per_channel

    def forward(self, f_con: torch.Tensor):
        out = self.conv(f_con)
        if self.per_channel:
            out = out.mean(dim=(2, 3), keepdim=True)
        gamma, beta = out.chunk(2, dim=1)
        return gamma, beta


class Adaptor(nn.Module):
    """Restoration-aware branch producing per-scale fusion signals."""

    def __init__(self, config: ModelConfig | None = None, text_config: TextConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        tcfg = text_config or TextConfig()
        self.cfg = cfg
        self.cond_encoder = CondEncoder(cfg)
        self.encoder = UNetEncoder(cfg.latent_channels + cfg.cond_channels, cfg, tcfg.embed_dim)
        w1, w2, w3 = self.encoder.widths
        per_ch = cfg.per_channel_fusion
        # One producer per backbone skip scale; the deepest uses the middle
        # block output for extra processing.
        self.fusion = nn.ModuleList(
            [
                FusionProducer(w1, w1, per_ch),
                FusionProducer(w2, w2, per_ch),
                FusionProducer(w3, w3, per_ch),
            ]
        )
        # Optional ablation: also modulate the decoder (up-path) features,
        # driven by the same adaptor features at matching scales.
        self.up_fusion = None
        if cfg.modulate_up_path:
            self.up_fusion = nn.ModuleList(
                [
                    FusionProducer(w3, w3, per_ch),
                    FusionProducer(w2, w2, per_ch),
                    FusionProducer(w1, w1, per_ch),
                ]
            )

    @torch.no_grad()
    def init_from_backbone(self, backbone_unet: UNet) -> None:
        """Copy backbone encoder weights; extra input channels start at zero
        so the copied conv_in reproduces backbone activations exactly."""
        src = backbone_unet.encoder
        dst = self.encoder
        src_state = src.state_dict()
        dst_state = dst.state_dict()
        for name, tensor in src_state.items():
            if name == "conv_in.weight":
                dst.conv_in.weight.zero_()
                dst.conv_in.weight[:, : tensor.shape[1]].copy_(tensor)
            elif name in dst_state and dst_state[name].shape == tensor.shape:
                dst_state[name].copy_(tensor)
        dst.conv_in.bias.copy_(src.conv_in.bias)

    def forward(self, z_t, t, y, restoration_embedding, restoration_mask):
        """Returns the per-scale fusion list [(gamma, beta), ...]."""
        if y.shape[-1] != z_t.shape[-1] * self.cfg.ae_stride:
            raise ModelError(
                f"degraded image {tuple(y.shape)} does not match latent {tuple(z_t.shape)} at stride {self.cfg.ae_stride}"
            )
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        cond = self.cond_encoder(y)
        x = torch.cat([z_t, cond], dim=1)
        temb = self.encoder.time_embedding(t)
        (a1, a2, _a3), m = self.encoder(x, temb, restoration_embedding, restoration_mask)
        feats = [a1, a2, m]
        signals = [producer(f) for producer, f in zip(self.fusion, feats)]
        if self.up_fusion is not None:
            # Decoder scales run deepest first: 4 -> 8 -> 16.
            signals += [producer(f) for producer, f in zip(self.up_fusion, [m, a2, a1])]
        return signals


def adaptor_forward(adaptor: Adaptor, z_t, t, y, restoration_embedding, restoration_mask):
    return adaptor(z_t, t, y, restoration_embedding, restoration_mask)


def tip_forward(
    z_t,
    t,
    y,
    semantic_embedding,
    semantic_mask,
    restoration_embedding,
    restoration_mask,
    backbone: Backbone,
    adaptor: Adaptor,
) -> torch.Tensor:
    """Full restoration forward: frozen backbone with modulated skips."""
    backbone.assert_frozen()
    fusion = adaptor(z_t, t, y, restoration_embedding, restoration_mask)
    return backbone.unet(z_t, t, semantic_embedding, semantic_mask, fusion=fusion)


__all__ = [
    "Adaptor",
    "CondEncoder",
    "FusionProducer",
    "adaptor_forward",
    "modulate",
    "tip_forward",
]
