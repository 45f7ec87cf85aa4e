"""Dataclass configuration for datasets, models, training and sampling.

A run is fully described by one ``RunConfig``; the resolved config is
serialized into every run directory so results can be reproduced from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class GenConfig:
    """Procedural dataset generator settings."""

    resolution: int = 64
    channels: int = 3
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    supersample: int = 4
    # Shape radius range as a fraction of the image side.
    min_radius: float = 0.22
    max_radius: float = 0.38


@dataclass
class DegradeConfig:
    """Parameter ranges for the two degradation branches."""

    blur_sigma_range: tuple[float, float] = (0.5, 4.0)
    downsample_factor_range: tuple[float, float] = (1.5, 6.0)
    noise_sigma_range: tuple[float, float] = (0.02, 0.25)
    jpeg_quality_range: tuple[int, int] = (10, 90)
    # Wider single-order ranges for the blind (Real-ESRGAN style) branch.
    blind_blur_sigma_range: tuple[float, float] = (0.5, 5.0)
    blind_downsample_factor_range: tuple[float, float] = (1.5, 8.0)
    blind_noise_sigma_range: tuple[float, float] = (0.02, 0.3)
    blind_jpeg_quality_range: tuple[int, int] = (5, 90)
    blind_branch_prob: float = 0.5
    stage_apply_prob: float = 0.5
    verbose_prob: float = 0.5


@dataclass
class TextConfig:
    max_tokens: int = 32
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4


@dataclass
class ModelConfig:
    """Autoencoder + denoiser dimensions (desk scale)."""

    latent_channels: int = 4
    ae_stride: int = 4
    ae_base_width: int = 32
    unet_base_width: int = 48
    unet_channel_mult: tuple[int, ...] = (1, 2, 2)
    cond_channels: int = 16
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # Ablation switches.
    modulate_up_path: bool = False
    per_channel_fusion: bool = False


@dataclass
class TrainConfig:
    dataset_size: int = 5000
    heldout_size: int = 400
    batch_size: int = 16
    ae_steps: int = 3000
    ae_lr: float = 2e-3
    # Train the autoencoder on degraded variants alongside the clean
    # renders so its latent space can represent degraded appearance;
    # otherwise encode/decode projects corrupted images back to clean and
    # partially-restored outputs are unrepresentable.
    ae_degraded_variants: bool = True
    # Extra weight on a Laplacian high-pass reconstruction term. A plain
    # MSE autoencoder reconstructs noisy images as their smooth conditional
    # mean, collapsing the noise-residual dynamic range ~7x; partial-denoise
    # targets then all look fully denoised after the round trip.
    ae_highpass_weight: float = 4.0
    diffusion_steps: int = 4000
    diffusion_lr: float = 2e-3
    adaptor_steps: int = 4000
    adaptor_lr: float = 2e-3
    # Cosine-decay the adaptor learning rate down to this fraction of
    # adaptor_lr over the run (1.0 disables decay).
    adaptor_lr_floor: float = 0.1
    # Probability that an adaptor training pair is a strength-split pair:
    # the input carries a total blur/noise strength, the prompt names the
    # part to remove, and the target keeps the remainder. These pairs give
    # the prompt information the degraded input alone does not carry — how
    # much of the corruption should be removed — which is what makes
    # prompted restoration strength controllable.
    residual_target_prob: float = 0.5
    semantic_dropout: float = 0.10
    seed: int = 0
    log_every: int = 200


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance: float = 2.0
    # Experimental: also drop the degraded-image conditioning in the
    # unconditional pass (off by default; y is a measurement, not a prompt).
    guide_over_image: bool = False


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    text: TextConfig = field(default_factory=TextConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def build(tp, payload):
            kwargs = {}
            for f in dataclasses.fields(tp):
                if f.name not in payload:
                    continue
                v = payload[f.name]
                if dataclasses.is_dataclass(f.type) or f.name in _SECTIONS:
                    kwargs[f.name] = build(_SECTIONS[f.name], v)
                elif isinstance(v, list):
                    kwargs[f.name] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
                else:
                    kwargs[f.name] = v
            return tp(**kwargs)

        return build(cls, d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


_SECTIONS = {
    "gen": GenConfig,
    "degrade": DegradeConfig,
    "text": TextConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}
