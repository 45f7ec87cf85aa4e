#!/usr/bin/env python3
"""Semantic-prompting experiment: can the right caption rescue an image the
degradation has made ambiguous?

Heavily degrades held-out renders, restores each twice (with the true
caption vs. the empty prompt), and scores both with the probe classifier.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from tip_micro import checkpoint, degrade, procgen
from tip_micro.config import SamplerConfig
from tip_micro.evaluation import probe_accuracy, train_probe
from tip_micro.sampler import TipModels, restore_batch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--backbone", type=Path, required=True)
    ap.add_argument("--adaptor", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--count", type=int, default=100)
    ap.add_argument("--blur", type=float, default=4.0)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--guidance", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backbone, cfg = checkpoint.load_backbone(args.backbone)
    adaptor = checkpoint.load_adaptor(args.adaptor, backbone)
    models = TipModels(backbone=backbone, adaptor=adaptor)
    scfg = SamplerConfig(steps=args.steps, guidance=args.guidance)

    probe = train_probe([procgen.gen_sample(s) for s in range(2000)], seed=args.seed)

    samples = [procgen.gen_sample(seed) for seed in range(60_000, 60_000 + args.count)]
    rng = np.random.default_rng(args.seed)
    ys = np.stack(
        [
            degrade.apply_gaussian_noise(degrade.apply_gaussian_blur(s.image, args.blur), args.noise, rng)
            for s in samples
        ]
    )
    labels = [s.label for s in samples]
    restoration = ["Remove all degradation"] * len(samples)

    prompted = restore_batch(ys, [s.caption for s in samples], restoration, models, scfg, args.seed)
    blank = restore_batch(ys, [""] * len(samples), restoration, models, scfg, args.seed)

    result = {
        "count": args.count,
        "degraded_accuracy": probe_accuracy(ys, labels, probe),
        "prompted_accuracy": probe_accuracy(prompted, labels, probe),
        "empty_prompt_accuracy": probe_accuracy(blank, labels, probe),
        "blur": args.blur,
        "noise": args.noise,
    }
    result["accuracy_gain"] = result["prompted_accuracy"] - result["empty_prompt_accuracy"]
    args.out.write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
