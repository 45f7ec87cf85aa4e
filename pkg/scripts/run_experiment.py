#!/usr/bin/env python3
"""End-to-end experiment driver: dataset -> backbone -> adaptor -> metrics.

Equivalent to chaining the CLI subcommands, but keeps everything in one
process so intermediate artifacts (latents, probe) are reused. Writes
backbone.ckpt, adaptor.ckpt, config.json and metrics.json into --run.
"""

import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from tip_micro import checkpoint, degrade, evaluation, pipeline
from tip_micro.config import RunConfig
from tip_micro.sampler import TipModels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--run", type=Path, required=True)
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--eval-count", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    args.run.mkdir(parents=True, exist_ok=True)
    (args.run / "config.json").write_text(cfg.to_json())
    log = lambda m: print(m, flush=True)  # noqa: E731

    train, heldout = pipeline.load_or_generate_dataset(args.data, cfg)
    log(f"dataset: {len(train)} train / {len(heldout)} held out")

    backbone = pipeline.pretrain(train, cfg, log)
    checkpoint.save_backbone(args.run / "backbone.ckpt", backbone, cfg)
    adaptor = pipeline.train_adaptor(train, backbone, cfg, log)
    checkpoint.save_adaptor(args.run / "adaptor.ckpt", adaptor, backbone, cfg)
    models = TipModels(backbone=backbone, adaptor=adaptor)

    # Held-out restoration metrics on the parameterized branch.
    rng = np.random.default_rng(args.seed)
    dcfg = dataclasses.replace(cfg.degrade, blind_branch_prob=0.0)
    subset = heldout[: args.eval_count]
    ys, prompts = [], []
    for s in subset:
        y, _, prompt = degrade.synth_training_pair(s.image, rng, dcfg)
        ys.append(y)
        prompts.append(prompt.text)
    ys = np.stack(ys)
    clean = np.stack([s.image for s in subset])
    restored = []
    for i in range(0, len(subset), 25):
        restored.append(
            evaluation.restore_batch(
                ys[i : i + 25],
                [s.caption for s in subset[i : i + 25]],
                prompts[i : i + 25],
                models,
                cfg.sampler,
                args.seed,
            )
        )
    restored = np.concatenate(restored)
    report = evaluation.paired_metrics(restored, clean)
    base = evaluation.paired_metrics(ys, clean)
    report.config = cfg.to_dict()
    report.save(args.run / "metrics.json")
    log(
        f"psnr {base.mean_psnr:.2f} -> {report.mean_psnr:.2f} dB "
        f"(delta {report.mean_psnr - base.mean_psnr:+.2f}), "
        f"ssim {base.mean_ssim:.3f} -> {report.mean_ssim:.3f}"
    )


if __name__ == "__main__":
    main()
