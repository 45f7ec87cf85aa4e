import copy
import json

import numpy as np
import pytest

from tip_micro import degrade, procgen
from tip_micro.adaptor import Adaptor
from tip_micro.config import GenConfig, SamplerConfig
from tip_micro.diffcore import freeze
from tip_micro.errors import ModelError
from tip_micro.evaluation import (
    MetricsReport,
    ProbeClassifier,
    monotonicity_sweep,
    paired_metrics,
    probe_accuracy,
    prompt_walk,
    train_probe,
)
from tip_micro.sampler import TipModels


@pytest.fixture(scope="module")
def probe():
    samples = [procgen.gen_sample(seed) for seed in range(2000)]
    return train_probe(samples, epochs=30, seed=0)


@pytest.fixture()
def tiny_models(tiny_backbone):
    bb = freeze(copy.deepcopy(tiny_backbone))
    adaptor = Adaptor(bb.config, bb.text_config)
    adaptor.init_from_backbone(bb.unet)
    return TipModels(backbone=bb, adaptor=adaptor)


def test_probe_calibration_on_clean_images(probe):
    """The probe must be near-perfect on clean renders it never saw, or it
    cannot arbitrate semantic-restoration experiments."""
    heldout = [procgen.gen_sample(seed) for seed in range(10_000, 10_100)]
    images = np.stack([s.image for s in heldout])
    labels = [s.label for s in heldout]
    assert probe_accuracy(images, labels, probe) >= 0.95


def test_probe_degrades_under_heavy_corruption(probe):
    heldout = [procgen.gen_sample(seed) for seed in range(20_000, 20_060)]
    rng = np.random.default_rng(0)
    clean = np.stack([s.image for s in heldout])
    wrecked = np.stack(
        [degrade.apply_gaussian_noise(degrade.apply_gaussian_blur(s.image, 4.0), 0.5, rng) for s in heldout]
    )
    labels = [s.label for s in heldout]
    assert probe_accuracy(wrecked, labels, probe) < probe_accuracy(clean, labels, probe)


def test_probe_requires_training():
    fresh = ProbeClassifier(GenConfig().shapes, GenConfig().colors)
    with pytest.raises(ModelError):
        probe_accuracy(np.zeros((1, 64, 64, 3)), [("circle", "red")], fresh)


def test_monotonicity_sweep_validation(tiny_models, rng):
    y = rng.random((64, 64, 3)).astype(np.float32)
    with pytest.raises(ModelError):
        monotonicity_sweep(tiny_models, y, "denoise", [0.1, 0.2])
    with pytest.raises(ModelError):
        monotonicity_sweep(tiny_models, y, "denoise", [0.3, 0.2, 0.1])
    with pytest.raises(ModelError):
        monotonicity_sweep(tiny_models, y, "sharpen", [0.1, 0.2, 0.3])


def test_monotonicity_sweep_returns_correlation(tiny_models, rng):
    y = rng.random((64, 64, 3)).astype(np.float32)
    rho = monotonicity_sweep(tiny_models, y, "denoise", [0.06, 0.12, 0.18], SamplerConfig(steps=2, guidance=1.0))
    assert -1.0 <= rho <= 1.0


def test_prompt_walk_geometry_and_determinism(tiny_models, rng):
    y = rng.random((64, 64, 3)).astype(np.float32)
    grid = [["Dejpeg", "Denoise with sigma 0.06"], ["", "Remove all degradation"]]
    cfg = SamplerConfig(steps=2, guidance=1.0)
    img1 = prompt_walk(tiny_models, y, grid, cfg, seed=0)
    img2 = prompt_walk(tiny_models, y, grid, cfg, seed=0)
    assert img1.size == (2 * 64, 2 * (64 + 12))
    assert np.array_equal(np.asarray(img1), np.asarray(img2))
    with pytest.raises(ModelError):
        prompt_walk(tiny_models, y, [])


def test_metrics_report_roundtrip(tmp_path, rng):
    clean = rng.random((3, 32, 32, 3))
    noisy = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
    report = paired_metrics(noisy, clean)
    assert len(report.per_image_psnr) == 3
    assert report.mean_psnr == pytest.approx(np.mean(report.per_image_psnr))
    report.monotonicity = {"denoise": 0.9}
    report.save(tmp_path / "m.json")
    payload = json.loads((tmp_path / "m.json").read_text())
    assert payload["mean_psnr"] == pytest.approx(report.mean_psnr)
    assert payload["monotonicity"]["denoise"] == 0.9


def test_paired_metrics_identical_images(rng):
    imgs = rng.random((2, 32, 32, 3))
    report = paired_metrics(imgs, imgs.copy())
    assert report.mean_psnr == 100.0
    assert report.mean_ssim == pytest.approx(1.0)
