"""Procedural captioned dataset of anti-aliased geometric scenes.

Each sample is a colored shape on a differently colored background with a
caption drawn from the closed grammar "a {color} {shape} on a {color}
background". Generation is a pure function of (seed, config), and captions
round-trip exactly through :func:`parse_caption`, so semantic prompting can
be scored against exact labels.
"""

from __future__ import annotations

import json
import re
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .config import GenConfig
from .errors import ConfigurationError, DatasetError

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (45, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 50, 200),
    "white": (235, 235, 235),
    "black": (25, 25, 25),
}

_CAPTION_RE = re.compile(r"^a (\w+) (\w+) on a (\w+) background$")


@dataclass
class CleanSample:
    image: np.ndarray  # H x W x C float in [0, 1]
    caption: str
    label: tuple[str, str]  # (shape, foreground color)
    seed: int


@dataclass
class DatasetManifest:
    count: int
    image_dir: str
    records: list[dict]  # filename, caption, label, seed


def make_caption(color: str, shape: str, background: str) -> str:
    return f"a {color} {shape} on a {background} background"


def parse_caption(caption: str, config: GenConfig | None = None) -> tuple[str, str, str]:
    """Inverse of :func:`make_caption`; returns (color, shape, background)."""
    m = _CAPTION_RE.match(caption)
    if m is None:
        raise ValueError(f"caption does not match grammar: {caption!r}")
    color, shape, background = m.groups()
    if config is not None:
        if shape not in config.shapes or color not in config.colors or background not in config.colors:
            raise ValueError(f"caption uses out-of-vocabulary words: {caption!r}")
    return color, shape, background


def caption_vocabulary(config: GenConfig) -> list[str]:
    """All words producible by the caption grammar."""
    words = {"a", "on", "background"}
    words.update(config.shapes)
    words.update(config.colors)
    return sorted(words)


def _validate(config: GenConfig) -> None:
    if config.resolution <= 0 or config.resolution % 4 != 0:
        raise ConfigurationError(
            f"resolution must be positive and divisible by the autoencoder stride 4, got {config.resolution}"
        )
    if config.channels != 3:
        raise ConfigurationError("only RGB rendering is supported")
    for c in config.colors:
        if c not in COLOR_RGB:
            raise ConfigurationError(f"unknown color {c!r}")


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, fill) -> None:
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "triangle":
        pts = []
        for k in range(3):
            ang = -np.pi / 2 + 2 * np.pi * k / 3
            pts.append((cx + 1.15 * r * np.cos(ang), cy + 1.15 * r * np.sin(ang)))
        draw.polygon(pts, fill=fill)
    else:
        raise ConfigurationError(f"unknown shape {shape!r}")


def gen_sample(seed: int, config: GenConfig | None = None) -> CleanSample:
    """Render one captioned scene deterministically from ``seed``."""
    config = config or GenConfig()
    _validate(config)
    rng = np.random.default_rng(np.random.SeedSequence([0x71D, seed]))

    shape = config.shapes[rng.integers(len(config.shapes))]
    fg = config.colors[rng.integers(len(config.colors))]
    bg_choices = [c for c in config.colors if c != fg]
    bg = bg_choices[rng.integers(len(bg_choices))]

    res = config.resolution
    ss = config.supersample
    big = res * ss
    img = Image.new("RGB", (big, big), COLOR_RGB[bg])
    draw = ImageDraw.Draw(img)

    r = rng.uniform(config.min_radius, config.max_radius) * big
    margin = r + 0.02 * big
    cx = rng.uniform(margin, big - margin)
    cy = rng.uniform(margin, big - margin)
    _draw_shape(draw, shape, cx, cy, r, COLOR_RGB[fg])

    img = img.resize((res, res), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return CleanSample(
        image=arr,
        caption=make_caption(fg, shape, bg),
        label=(shape, fg),
        seed=seed,
    )


def save_png(image: np.ndarray, path: str | Path) -> None:
    """Write a [0,1] float image as 8-bit lossless PNG."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def gen_dataset(n: int, seed: int, out_dir: str | Path, config: GenConfig | None = None) -> DatasetManifest:
    """Write ``n`` PNGs plus ``manifest.jsonl`` under ``out_dir``.

    Re-running with the same (n, seed, config) reproduces the manifest byte
    for byte. Partial output is removed on failure.
    """
    config = config or GenConfig()
    _validate(config)
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(n):
            sample_seed = seed * 1_000_003 + i
            sample = gen_sample(sample_seed, config)
            fname = f"{i:06d}.png"
            save_png(sample.image, image_dir / fname)
            records.append(
                {
                    "filename": fname,
                    "caption": sample.caption,
                    "label": list(sample.label),
                    "seed": sample_seed,
                }
            )
        with open(out_dir / "manifest.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        shutil.rmtree(out_dir, ignore_errors=True)
        raise DatasetError(f"failed writing dataset to {out_dir}: {exc}") from exc
    return DatasetManifest(count=n, image_dir=str(image_dir), records=records)


def load_manifest(out_dir: str | Path) -> DatasetManifest:
    out_dir = Path(out_dir)
    path = out_dir / "manifest.jsonl"
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    records = [json.loads(line) for line in path.read_text().splitlines() if line]
    return DatasetManifest(count=len(records), image_dir=str(out_dir / "images"), records=records)


def load_samples(manifest: DatasetManifest) -> list[CleanSample]:
    out = []
    for rec in manifest.records:
        img = load_png(Path(manifest.image_dir) / rec["filename"])
        out.append(CleanSample(image=img, caption=rec["caption"], label=tuple(rec["label"]), seed=rec["seed"]))
    return out
