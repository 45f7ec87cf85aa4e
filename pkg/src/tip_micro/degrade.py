"""Parameterized degradation pipeline and the restoration prompt grammar.

Training pairs are synthesized by one of two branches, chosen 50/50: a
blind branch that always applies all four stages with wide parameter
ranges (prompted "Remove all degradation"), and a parameterized branch
that applies each stage independently with probability 0.5 and renders a
clause per applied stage, optionally embedding the numeric parameter
("Deblur with sigma 3.0" vs "Deblur"). Stage order is fixed:
blur -> downsample -> noise -> jpeg.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import convolve1d

from .config import DegradeConfig
from .errors import DatasetError, ParameterError, PromptParseError


class StageKind(enum.Enum):
    BLUR = "blur"
    DOWNSAMPLE = "downsample"
    NOISE = "noise"
    JPEG = "jpeg"


STAGE_ORDER = (StageKind.BLUR, StageKind.DOWNSAMPLE, StageKind.NOISE, StageKind.JPEG)

BLIND_PROMPT = "Remove all degradation"

# Verb and numeric format per stage; precision matches the rendered prompt.
_TEMPLATES = {
    StageKind.BLUR: ("Deblur", "Deblur with sigma {:.1f}", 1),
    StageKind.DOWNSAMPLE: ("Upsample", "Upsample to {:.1f}x", 1),
    StageKind.NOISE: ("Denoise", "Denoise with sigma {:.2f}", 2),
    StageKind.JPEG: ("Dejpeg", "Dejpeg with quality {:d}", 0),
}


class PipelineMode(enum.Enum):
    PARAMETERIZED = "parameterized"
    REAL_ESRGAN = "real_esrgan"


@dataclass(frozen=True)
class DegradationStage:
    kind: StageKind
    param: float | None  # blur/noise sigma, resize factor or jpeg quality
    applied: bool = True
    verbose: bool = True  # rendered clause includes the numeric parameter

    def rendered_param(self) -> float | None:
        """Parameter at the precision surviving a render/parse round trip."""
        if not (self.applied and self.verbose) or self.param is None:
            return None
        if self.kind is StageKind.JPEG:
            return float(int(self.param))
        return round(float(self.param), _TEMPLATES[self.kind][2])


@dataclass(frozen=True)
class DegradationSpec:
    stages: tuple[DegradationStage, ...]
    mode: PipelineMode = PipelineMode.PARAMETERIZED

    def rendered_key(self):
        """Canonical form compared by the render/parse round-trip tests."""
        if self.mode is PipelineMode.REAL_ESRGAN:
            return (self.mode,)
        return (
            self.mode,
            tuple(
                (s.kind, s.verbose, s.rendered_param())
                for s in self.stages
                if s.applied
            ),
        )

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "stages": [
                {"kind": s.kind.value, "param": s.param, "applied": s.applied, "verbose": s.verbose}
                for s in self.stages
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DegradationSpec":
        return cls(
            stages=tuple(
                DegradationStage(
                    kind=StageKind(s["kind"]),
                    param=s["param"],
                    applied=s["applied"],
                    verbose=s["verbose"],
                )
                for s in d["stages"]
            ),
            mode=PipelineMode(d["mode"]),
        )


@dataclass(frozen=True)
class RestorationPrompt:
    text: str


# ---------------------------------------------------------------------------
# Image operators
# ---------------------------------------------------------------------------


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflect borders."""
    if sigma < 0:
        raise ParameterError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image
    k = _gaussian_kernel(sigma)
    out = image.astype(np.float64)
    out = convolve1d(out, k, axis=0, mode="reflect")
    out = convolve1d(out, k, axis=1, mode="reflect")
    return out.astype(np.float32)


def apply_downsample(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize down by ``factor`` and back to the input resolution."""
    if factor < 1:
        raise ParameterError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1.0:
        return image
    h, w = image.shape[:2]
    small_h = max(1, round(h / factor))
    small_w = max(1, round(w / factor))
    small = cv2.resize(image.astype(np.float32), (small_w, small_h), interpolation=cv2.INTER_LINEAR)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)


def apply_gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add iid zero-mean Gaussian noise per channel, then clamp to [0,1]."""
    if sigma < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image
    noisy = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def apply_jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    """Round trip through a baseline JPEG codec at the given quality."""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ParameterError(f"jpeg quality must be in [1,100], got {quality}")
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(u8, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_JPEG_QUALITY, quality])
    if not ok:
        raise ParameterError("jpeg encoding failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    return (cv2.cvtColor(dec, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)


def apply_spec(image: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply every applied stage of ``spec`` in pipeline order."""
    y = image
    for stage in spec.stages:
        if not stage.applied:
            continue
        if stage.kind is StageKind.BLUR:
            y = apply_gaussian_blur(y, stage.param)
        elif stage.kind is StageKind.DOWNSAMPLE:
            y = apply_downsample(y, stage.param)
        elif stage.kind is StageKind.NOISE:
            y = apply_gaussian_noise(y, stage.param, rng)
        elif stage.kind is StageKind.JPEG:
            y = apply_jpeg(y, int(stage.param))
    return np.asarray(y, dtype=np.float32)


# ---------------------------------------------------------------------------
# Spec synthesis and the prompt grammar
# ---------------------------------------------------------------------------


def _draw_param(kind: StageKind, cfg: DegradeConfig, rng: np.random.Generator, blind: bool) -> float:
    if kind is StageKind.BLUR:
        lo, hi = cfg.blind_blur_sigma_range if blind else cfg.blur_sigma_range
    elif kind is StageKind.DOWNSAMPLE:
        lo, hi = cfg.blind_downsample_factor_range if blind else cfg.downsample_factor_range
    elif kind is StageKind.NOISE:
        lo, hi = cfg.blind_noise_sigma_range if blind else cfg.noise_sigma_range
    else:
        lo, hi = cfg.blind_jpeg_quality_range if blind else cfg.jpeg_quality_range
        return float(rng.integers(lo, hi + 1))
    return float(rng.uniform(lo, hi))


def sample_spec(rng: np.random.Generator, config: DegradeConfig | None = None) -> DegradationSpec:
    """Draw a degradation spec following the 50/50 branch mixing."""
    cfg = config or DegradeConfig()
    blind = rng.random() < cfg.blind_branch_prob
    if blind:
        stages = tuple(
            DegradationStage(kind=k, param=_draw_param(k, cfg, rng, blind=True), applied=True, verbose=False)
            for k in STAGE_ORDER
        )
        return DegradationSpec(stages=stages, mode=PipelineMode.REAL_ESRGAN)
    stages = []
    for k in STAGE_ORDER:
        applied = rng.random() < cfg.stage_apply_prob
        param = _draw_param(k, cfg, rng, blind=False) if applied else None
        verbose = bool(rng.random() < cfg.verbose_prob) if applied else False
        stages.append(DegradationStage(kind=k, param=param, applied=applied, verbose=verbose))
    return DegradationSpec(stages=tuple(stages), mode=PipelineMode.PARAMETERIZED)


def render_prompt(spec: DegradationSpec) -> RestorationPrompt:
    """Deterministic natural-language rendering of a spec."""
    if spec.mode is PipelineMode.REAL_ESRGAN:
        return RestorationPrompt(BLIND_PROMPT)
    clauses = []
    for stage in spec.stages:
        if not stage.applied:
            continue
        terse, verbose_tpl, _ = _TEMPLATES[stage.kind]
        if stage.verbose:
            if stage.kind is StageKind.JPEG:
                clauses.append(verbose_tpl.format(int(stage.param)))
            else:
                clauses.append(verbose_tpl.format(stage.param))
        else:
            clauses.append(terse)
    return RestorationPrompt("; ".join(clauses))


_CLAUSE_PARSERS = {
    "deblur": (StageKind.BLUR, "sigma"),
    "upsample": (StageKind.DOWNSAMPLE, "factor"),
    "denoise": (StageKind.NOISE, "sigma"),
    "dejpeg": (StageKind.JPEG, "quality"),
}


def _parse_clause(clause: str) -> DegradationStage:
    words = clause.strip().split()
    verb = words[0].lower()
    if verb not in _CLAUSE_PARSERS:
        raise PromptParseError(f"unknown restoration clause: {clause!r}")
    kind, _ = _CLAUSE_PARSERS[verb]
    if len(words) == 1:
        return DegradationStage(kind=kind, param=None, applied=True, verbose=False)
    try:
        if kind is StageKind.BLUR and words[1:3] == ["with", "sigma"] and len(words) == 4:
            return DegradationStage(kind, float(words[3]), True, True)
        if kind is StageKind.NOISE and words[1:3] == ["with", "sigma"] and len(words) == 4:
            return DegradationStage(kind, float(words[3]), True, True)
        if kind is StageKind.JPEG and words[1:3] == ["with", "quality"] and len(words) == 4:
            return DegradationStage(kind, float(int(words[3])), True, True)
        if kind is StageKind.DOWNSAMPLE and words[1] == "to" and len(words) == 3 and words[2].endswith("x"):
            return DegradationStage(kind, float(words[2][:-1]), True, True)
    except ValueError as exc:
        raise PromptParseError(f"bad numeric parameter in clause: {clause!r}") from exc
    raise PromptParseError(f"malformed restoration clause: {clause!r}")


def parse_prompt(text: str) -> DegradationSpec:
    """Inverse of :func:`render_prompt` up to rendered numeric precision.

    Unknown verbs or malformed clauses raise :class:`PromptParseError`
    naming the offending clause. A trailing ";" is tolerated.
    """
    stripped = text.strip()
    if stripped.lower() == BLIND_PROMPT.lower():
        return DegradationSpec(stages=(), mode=PipelineMode.REAL_ESRGAN)
    if stripped.endswith(";"):
        stripped = stripped[:-1]
    if not stripped:
        return DegradationSpec(
            stages=tuple(DegradationStage(k, None, applied=False, verbose=False) for k in STAGE_ORDER),
            mode=PipelineMode.PARAMETERIZED,
        )
    parsed = [_parse_clause(c) for c in stripped.split(";")]
    by_kind = {}
    for st in parsed:
        if st.kind in by_kind:
            raise PromptParseError(f"duplicate clause for stage {st.kind.value}")
        by_kind[st.kind] = st
    # Clauses may arrive in any order (hand-written prompts often put
    # "Upsample" first); the spec always stores pipeline order.
    stages = tuple(
        by_kind.get(k, DegradationStage(k, None, applied=False, verbose=False)) for k in STAGE_ORDER
    )
    return DegradationSpec(stages=stages, mode=PipelineMode.PARAMETERIZED)


def synth_training_pair(
    x: np.ndarray, rng: np.random.Generator, config: DegradeConfig | None = None
) -> tuple[np.ndarray, DegradationSpec, RestorationPrompt]:
    """Synthesize a (degraded image, spec, restoration prompt) training pair."""
    spec = sample_spec(rng, config)
    # Degrade using the exact (unrounded) parameters but pair with the
    # rendered prompt, whose precision defines what the model can see.
    y = apply_spec(x, spec, rng)
    return y, spec, render_prompt(spec)


def emit_benchmark(
    samples,
    out_dir: str | Path,
    seed: int,
    config: DegradeConfig | None = None,
    blind_only: bool = False,
    parameterized_only: bool = False,
) -> list[dict]:
    """Write paired clean/ degraded/ directories plus pairs.jsonl."""
    from . import procgen

    out_dir = Path(out_dir)
    clean_dir = out_dir / "clean"
    deg_dir = out_dir / "degraded"
    cfg = config or DegradeConfig()
    if blind_only:
        cfg = replace(cfg, blind_branch_prob=1.0)
    if parameterized_only:
        cfg = replace(cfg, blind_branch_prob=0.0)
    try:
        clean_dir.mkdir(parents=True, exist_ok=True)
        deg_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i, sample in enumerate(samples):
            rng = np.random.default_rng(np.random.SeedSequence([0xDE6, seed, i]))
            y, spec, prompt = synth_training_pair(sample.image, rng, cfg)
            fname = f"{i:06d}.png"
            procgen.save_png(sample.image, clean_dir / fname)
            procgen.save_png(y, deg_dir / fname)
            records.append(
                {
                    "filename": fname,
                    "restoration_prompt": prompt.text,
                    "spec": spec.to_json_dict(),
                    "caption": sample.caption,
                    "label": list(sample.label),
                    "seed": int(seed),
                }
            )
        with open(out_dir / "pairs.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"failed writing benchmark to {out_dir}: {exc}") from exc
    return records
