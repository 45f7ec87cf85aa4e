import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from tip_micro import degrade
from tip_micro.config import DegradeConfig
from tip_micro.degrade import (
    BLIND_PROMPT,
    STAGE_ORDER,
    DegradationSpec,
    DegradationStage,
    PipelineMode,
    StageKind,
    apply_downsample,
    apply_gaussian_blur,
    apply_gaussian_noise,
    apply_jpeg,
    parse_prompt,
    render_prompt,
    sample_spec,
    synth_training_pair,
)
from tip_micro.errors import ParameterError, PromptParseError
from tip_micro.metrics import psnr


def stage(kind, param, applied=True, verbose=True):
    return DegradationStage(kind=kind, param=param, applied=applied, verbose=verbose)


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------


def test_blur_sigma_zero_identity(rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    assert apply_gaussian_blur(img, 0.0) is img


def test_blur_negative_sigma():
    with pytest.raises(ParameterError):
        apply_gaussian_blur(np.zeros((8, 8, 3)), -1.0)


def test_blur_impulse_matches_analytic_kernel():
    # Impulse response equals the normalized separable Gaussian kernel.
    sigma = 1.0
    radius = math.ceil(3 * sigma)
    img = np.zeros((33, 33, 1), dtype=np.float32)
    img[16, 16, 0] = 1.0
    out = apply_gaussian_blur(img, sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    expected = np.outer(k, k)
    window = out[16 - radius : 16 + radius + 1, 16 - radius : 16 + radius + 1, 0]
    assert np.abs(window - expected).max() <= 1e-6
    assert abs(out.sum() - 1.0) <= 1e-6


def test_blur_constant_preserved():
    img = np.full((24, 24, 3), 0.5, dtype=np.float32)
    out = apply_gaussian_blur(img, 2.9)
    assert np.abs(out - 0.5).max() <= 1e-6


# ---------------------------------------------------------------------------
# downsample
# ---------------------------------------------------------------------------


def test_downsample_identity(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    assert apply_downsample(img, 1.0) is img


def test_downsample_constant():
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    out = apply_downsample(img, 6.0)
    assert np.abs(out - 0.5).max() <= 1e-6


def test_downsample_rejects_upscale_factor():
    with pytest.raises(ParameterError):
        apply_downsample(np.zeros((8, 8, 3)), 0.5)


def test_downsample_smooths_checkerboard():
    board = np.indices((64, 64)).sum(axis=0) % 2
    img = np.repeat(board[:, :, None], 3, axis=2).astype(np.float32)
    out = apply_downsample(img, 4.0)
    # Independent reference resampler agrees that variance collapses.
    ref = Image.fromarray((img * 255).astype(np.uint8)).resize((16, 16), Image.BILINEAR)
    ref = np.asarray(ref.resize((64, 64), Image.BILINEAR), dtype=np.float32) / 255.0
    assert out.var() <= img.var() / 10.0
    assert ref.var() <= img.var() / 10.0


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def test_noise_sigma_zero_identity(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    assert apply_gaussian_noise(img, 0.0, rng) is img


def test_noise_empirical_std(rng):
    img = np.full((64, 64, 3), 0.5, dtype=np.float32)
    out = apply_gaussian_noise(img, 0.24, rng)
    assert 0.22 <= (out - 0.5).std() <= 0.26


def test_noise_clamped(rng):
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    out = apply_gaussian_noise(img, 5.0, rng)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_noise_negative_sigma(rng):
    with pytest.raises(ParameterError):
        apply_gaussian_noise(np.zeros((4, 4, 3)), -0.1, rng)


# ---------------------------------------------------------------------------
# jpeg
# ---------------------------------------------------------------------------


def _gradient_image():
    x = np.linspace(0, 1, 64, dtype=np.float32)
    img = np.stack([np.tile(x, (64, 1))] * 3, axis=2)
    return img


def test_jpeg_high_quality_psnr():
    img = _gradient_image()
    out = apply_jpeg(img, 95)
    assert out.shape == img.shape
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert psnr(img, out) >= 35.0


def test_jpeg_quality_monotonicity():
    img = _gradient_image()
    assert psnr(img, apply_jpeg(img, 10)) < psnr(img, apply_jpeg(img, 95))


def test_jpeg_quality_range():
    for q in (0, 101):
        with pytest.raises(ParameterError):
            apply_jpeg(np.zeros((8, 8, 3), dtype=np.float32), q)


# ---------------------------------------------------------------------------
# prompt rendering / parsing
# ---------------------------------------------------------------------------


def test_render_examples_from_templates():
    spec = DegradationSpec(stages=(stage(StageKind.BLUR, 3.0),), mode=PipelineMode.PARAMETERIZED)
    assert render_prompt(spec).text == "Deblur with sigma 3.0"

    spec = DegradationSpec(
        stages=(stage(StageKind.DOWNSAMPLE, 6.0), stage(StageKind.NOISE, 0.06)),
        mode=PipelineMode.PARAMETERIZED,
    )
    assert render_prompt(spec).text == "Upsample to 6.0x; Denoise with sigma 0.06"

    spec = DegradationSpec(stages=(stage(StageKind.JPEG, 30, verbose=False),), mode=PipelineMode.PARAMETERIZED)
    assert render_prompt(spec).text == "Dejpeg"


def test_render_empty_and_blind():
    empty = DegradationSpec(stages=(), mode=PipelineMode.PARAMETERIZED)
    assert render_prompt(empty).text == ""
    blind = DegradationSpec(stages=(), mode=PipelineMode.REAL_ESRGAN)
    assert render_prompt(blind).text == BLIND_PROMPT


def test_parse_examples():
    spec = parse_prompt("Deblur with sigma 3.0; Denoise with sigma 0.24")
    applied = [s for s in spec.stages if s.applied]
    assert [(s.kind, s.param, s.verbose) for s in applied] == [
        (StageKind.BLUR, 3.0, True),
        (StageKind.NOISE, 0.24, True),
    ]
    assert parse_prompt("").mode is PipelineMode.PARAMETERIZED
    assert all(not s.applied for s in parse_prompt("").stages)
    assert parse_prompt(BLIND_PROMPT).mode is PipelineMode.REAL_ESRGAN


def test_parse_trailing_separator_tolerated():
    spec = parse_prompt("Upsample to 6.0x; Deblur with sigma 2.9;")
    # A manually written prompt may list clauses out of pipeline order.
    assert [s.kind for s in spec.stages if s.applied] == [StageKind.BLUR, StageKind.DOWNSAMPLE]


def test_parse_rejects_unknown_verb():
    with pytest.raises(PromptParseError, match="Sharpen"):
        parse_prompt("Sharpen a lot")


def test_parse_rejects_malformed_clause():
    with pytest.raises(PromptParseError):
        parse_prompt("Deblur with sigma")
    with pytest.raises(PromptParseError):
        parse_prompt("Denoise with sigma banana")
    with pytest.raises(PromptParseError):
        parse_prompt("Deblur; Deblur")


@given(seed=st.integers(min_value=0, max_value=10**6))
@settings(max_examples=200, deadline=None)
def test_roundtrip_property(seed):
    rng = np.random.default_rng(seed)
    spec = sample_spec(rng)
    again = parse_prompt(render_prompt(spec).text)
    assert again.rendered_key() == spec.rendered_key()


def test_rendered_order_matches_pipeline_order(rng):
    for _ in range(200):
        spec = sample_spec(rng)
        prompt = render_prompt(spec).text
        if spec.mode is PipelineMode.REAL_ESRGAN or not prompt:
            continue
        verbs = [c.strip().split()[0].lower() for c in prompt.split(";")]
        order = {"deblur": 0, "upsample": 1, "denoise": 2, "dejpeg": 3}
        ranks = [order[v] for v in verbs]
        assert ranks == sorted(ranks)


# ---------------------------------------------------------------------------
# pair synthesis
# ---------------------------------------------------------------------------


def test_synth_pair_deterministic(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    y1, s1, p1 = synth_training_pair(img, np.random.default_rng(42))
    y2, s2, p2 = synth_training_pair(img, np.random.default_rng(42))
    assert np.array_equal(y1, y2)
    assert s1 == s2 and p1 == p2


def test_synth_pair_blind_branch_prompt(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    cfg = DegradeConfig(blind_branch_prob=1.0)
    _, spec, prompt = synth_training_pair(img, rng, cfg)
    assert spec.mode is PipelineMode.REAL_ESRGAN
    assert prompt.text == BLIND_PROMPT
    assert all(s.applied for s in spec.stages)
    assert [s.kind for s in spec.stages] == list(STAGE_ORDER)


def test_degenerate_all_skipped_is_identity(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    spec = DegradationSpec(
        stages=tuple(DegradationStage(k, None, applied=False, verbose=False) for k in STAGE_ORDER),
        mode=PipelineMode.PARAMETERIZED,
    )
    y = degrade.apply_spec(img, spec, rng)
    assert np.array_equal(y, img)
    assert render_prompt(spec).text == ""


def test_branch_and_stage_frequencies():
    rng = np.random.default_rng(7)
    n = 10_000
    blind = 0
    stage_counts = {k: 0 for k in STAGE_ORDER}
    param_specs = 0
    for _ in range(n):
        spec = sample_spec(rng)
        if spec.mode is PipelineMode.REAL_ESRGAN:
            blind += 1
        else:
            param_specs += 1
            for s in spec.stages:
                if s.applied:
                    stage_counts[s.kind] += 1
    assert abs(blind / n - 0.5) < 0.02
    for k in STAGE_ORDER:
        assert abs(stage_counts[k] / param_specs - 0.5) < 0.02


def test_identity_parameters_change_nothing(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    assert np.array_equal(apply_gaussian_blur(img, 0.0), img)
    assert np.array_equal(apply_downsample(img, 1.0), img)
    assert np.array_equal(apply_gaussian_noise(img, 0.0, rng), img)
    # JPEG at max quality only moves pixels by codec round-off
    # (on codec-friendly smooth content; 4:2:0 subsampling shreds iid noise).
    smooth = _gradient_image()
    out = apply_jpeg(smooth, 100)
    assert psnr(smooth, out) >= 40.0


def test_emit_benchmark(tmp_path, rng):
    from tip_micro import procgen

    samples = [procgen.gen_sample(i) for i in range(5)]
    records = degrade.emit_benchmark(samples, tmp_path / "bench", seed=3)
    assert len(records) == 5
    assert (tmp_path / "bench" / "pairs.jsonl").exists()
    for rec in records:
        assert (tmp_path / "bench" / "clean" / rec["filename"]).exists()
        assert (tmp_path / "bench" / "degraded" / rec["filename"]).exists()
        spec = DegradationSpec.from_json_dict(rec["spec"])
        assert render_prompt(spec).text == rec["restoration_prompt"]
