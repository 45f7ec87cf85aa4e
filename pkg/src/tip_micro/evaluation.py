"""Experiment drivers: probe classifier for semantic fidelity, restoration
strength sweeps, and prompt-space walking grids.

The probe is an evaluation instrument only: a small convnet trained on
clean procedural renders to predict (shape, color), standing in for
embedding-based semantic metrics at desk scale.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .config import GenConfig, SamplerConfig
from .errors import ModelError
from .metrics import gradient_energy, noise_residual, psnr, spearman, ssim
from .procgen import CleanSample
from .sampler import TipModels, restore_batch


# ---------------------------------------------------------------------------
# Probe classifier
# ---------------------------------------------------------------------------


class ProbeClassifier(nn.Module):
    """Small convnet with separate shape and color heads."""

    def __init__(self, shapes: tuple[str, ...], colors: tuple[str, ...]):
        super().__init__()
        self.shapes = tuple(shapes)
        self.colors = tuple(colors)
        # Spatial layout matters (foreground vs background color), so the
        # head works on a flattened 4x4 map rather than a global average.
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(64 * 4 * 4, 128), nn.ReLU(),
        )
        self.shape_head = nn.Linear(128, len(self.shapes))
        self.color_head = nn.Linear(128, len(self.colors))
        self.trained = False

    def forward(self, x: torch.Tensor):
        h = self.features(x)
        return self.shape_head(h), self.color_head(h)

    @torch.no_grad()
    def predict(self, images: np.ndarray) -> list[tuple[str, str]]:
        """images (B,H,W,3) in [0,1] -> predicted (shape, color) labels."""
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
        logits_s, logits_c = self(x)
        out = []
        for i in range(x.shape[0]):
            out.append((self.shapes[int(logits_s[i].argmax())], self.colors[int(logits_c[i].argmax())]))
        return out


def train_probe(
    samples: list[CleanSample],
    config: GenConfig | None = None,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> ProbeClassifier:
    cfg = config or GenConfig()
    probe = ProbeClassifier(cfg.shapes, cfg.colors)
    torch.manual_seed(seed)
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
    shape_ids = torch.tensor([probe.shapes.index(s.label[0]) for s in samples])
    color_ids = torch.tensor([probe.colors.index(s.label[1]) for s in samples])
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    n = len(samples)
    gen = torch.Generator().manual_seed(seed)
    probe.train()
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            logits_s, logits_c = probe(images[idx])
            loss = F.cross_entropy(logits_s, shape_ids[idx]) + F.cross_entropy(logits_c, color_ids[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.trained = True
    return probe


def probe_accuracy(images: np.ndarray, labels: list[tuple[str, str]], probe: ProbeClassifier) -> float:
    """Fraction of images whose (shape, color) are both predicted correctly."""
    if not probe.trained:
        raise ModelError("probe classifier has not been trained")
    preds = probe.predict(images)
    hits = sum(p == tuple(l) for p, l in zip(preds, labels))
    return hits / max(1, len(labels))


# ---------------------------------------------------------------------------
# Restoration-strength sweeps
# ---------------------------------------------------------------------------

_SWEEP_TEMPLATES = {
    "denoise": "Denoise with sigma {:.2f}",
    "deblur": "Deblur with sigma {:.1f}",
}


def monotonicity_sweep(
    models: TipModels,
    y: np.ndarray,
    task: str,
    strengths: list[float],
    sampler_config: SamplerConfig | None = None,
    seed: int = 0,
) -> float:
    """Spearman correlation between prompted strength and metric response.

    For "denoise" the response is the drop in high-pass noise residual;
    for "deblur" it is the rise in gradient energy (sharpness).
    """
    if len(strengths) < 3:
        raise ModelError(f"need at least 3 strengths, got {len(strengths)}")
    if list(strengths) != sorted(strengths):
        raise ModelError("strengths must be sorted ascending")
    template = _SWEEP_TEMPLATES.get(task)
    if template is None:
        raise ModelError(f"unknown sweep task {task!r}")
    prompts = [template.format(s) for s in strengths]
    ys = np.repeat(y[None], len(prompts), axis=0)
    outs = restore_batch(ys, [""] * len(prompts), prompts, models, sampler_config, seed)
    if task == "denoise":
        responses = [-noise_residual(out) for out in outs]
    else:
        responses = [gradient_energy(out) for out in outs]
    return spearman(strengths, responses)


# ---------------------------------------------------------------------------
# Prompt-space walking grid
# ---------------------------------------------------------------------------


def prompt_walk(
    models: TipModels,
    y: np.ndarray,
    prompt_grid: list[list[str]],
    sampler_config: SamplerConfig | None = None,
    seed: int = 0,
    semantic_prompt: str = "",
) -> Image.Image:
    """Render an R x C grid of restorations, one per prompt, with the prompt
    text in each cell margin. Deterministic given the seed."""
    if not prompt_grid or not prompt_grid[0]:
        raise ModelError("prompt grid must be non-empty")
    rows, cols = len(prompt_grid), len(prompt_grid[0])
    flat = [p for row in prompt_grid for p in row]
    ys = np.repeat(y[None], len(flat), axis=0)
    outs = restore_batch(ys, [semantic_prompt] * len(flat), flat, models, sampler_config, seed)

    h, w = y.shape[:2]
    margin = 12
    cell_h, cell_w = h + margin, w
    canvas = Image.new("RGB", (cols * cell_w, rows * cell_h), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for r in range(rows):
        for c in range(cols):
            out = outs[r * cols + c]
            tile = Image.fromarray(np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8))
            canvas.paste(tile, (c * cell_w, r * cell_h))
            label = prompt_grid[r][c][: w // 4] or "(blind)"
            draw.text((c * cell_w + 1, r * cell_h + h + 1), label, fill=(0, 0, 0))
    return canvas


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    per_image_psnr: list[float] = field(default_factory=list)
    per_image_ssim: list[float] = field(default_factory=list)
    probe_accuracy: float | None = None
    monotonicity: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_image_psnr)) if self.per_image_psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_image_ssim)) if self.per_image_ssim else float("nan")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def paired_metrics(restored: np.ndarray, clean: np.ndarray) -> MetricsReport:
    """Per-image PSNR/SSIM of restored (B,H,W,3) against clean images."""
    report = MetricsReport()
    for r, c in zip(restored, clean):
        report.per_image_psnr.append(psnr(r, c))
        report.per_image_ssim.append(ssim(r, c))
    return report
