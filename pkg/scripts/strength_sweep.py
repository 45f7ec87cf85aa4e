#!/usr/bin/env python3
"""Restoration-strength experiments on trained checkpoints.

Two questions:
  1. Monotonicity — does asking for more denoising/deblurring do more of it?
     (Spearman correlation between prompted strength and metric response.)
  2. Task decoupling — does "Denoise ..." move the noise metric more than the
     sharpness metric, and "Deblur ..." the reverse?
"""

import argparse
import json
from pathlib import Path

import numpy as np

from tip_micro import checkpoint, degrade, procgen
from tip_micro.config import SamplerConfig
from tip_micro.evaluation import monotonicity_sweep
from tip_micro.metrics import gradient_energy, noise_residual
from tip_micro.sampler import TipModels, restore_batch

DENOISE_STRENGTHS = [0.06, 0.12, 0.18, 0.24]
DEBLUR_STRENGTHS = [1.0, 2.0, 3.0, 4.0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--backbone", type=Path, required=True)
    ap.add_argument("--adaptor", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--count", type=int, default=50)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--guidance", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backbone, cfg = checkpoint.load_backbone(args.backbone)
    adaptor = checkpoint.load_adaptor(args.adaptor, backbone)
    models = TipModels(backbone=backbone, adaptor=adaptor)
    scfg = SamplerConfig(steps=args.steps, guidance=args.guidance)

    # Mixed blur+noise inputs so both tasks have something to act on.
    samples = [procgen.gen_sample(seed) for seed in range(50_000, 50_000 + args.count)]
    rng = np.random.default_rng(args.seed)
    ys = [
        degrade.apply_gaussian_noise(degrade.apply_gaussian_blur(s.image, 2.0), 0.2, rng)
        for s in samples
    ]

    denoise_rho = [
        monotonicity_sweep(models, y, "denoise", DENOISE_STRENGTHS, scfg, args.seed) for y in ys
    ]
    deblur_rho = [
        monotonicity_sweep(models, y, "deblur", DEBLUR_STRENGTHS, scfg, args.seed) for y in ys
    ]

    # Decoupling: single-task prompts, metric deltas against the input.
    ys_arr = np.stack(ys)
    nulls = [""] * len(ys)
    denoised = restore_batch(ys_arr, nulls, ["Denoise with sigma 0.24"] * len(ys), models, scfg, args.seed)
    deblurred = restore_batch(ys_arr, nulls, ["Deblur with sigma 4.0"] * len(ys), models, scfg, args.seed)
    noise_drop_dn = np.mean([noise_residual(y) - noise_residual(o) for y, o in zip(ys, denoised)])
    noise_drop_db = np.mean([noise_residual(y) - noise_residual(o) for y, o in zip(ys, deblurred)])
    sharp_gain_db = np.mean([gradient_energy(o) - gradient_energy(y) for y, o in zip(ys, deblurred)])
    sharp_gain_dn = np.mean([gradient_energy(o) - gradient_energy(y) for y, o in zip(ys, denoised)])

    result = {
        "denoise_monotonicity_mean": float(np.mean(denoise_rho)),
        "deblur_monotonicity_mean": float(np.mean(deblur_rho)),
        "noise_residual_drop": {"denoise_prompt": float(noise_drop_dn), "deblur_prompt": float(noise_drop_db)},
        "gradient_energy_gain": {"deblur_prompt": float(sharp_gain_db), "denoise_prompt": float(sharp_gain_dn)},
        "steps": args.steps,
        "guidance": args.guidance,
        "count": args.count,
    }
    args.out.write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
