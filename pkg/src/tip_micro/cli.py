"""Command-line orchestration of the full experiment lifecycle:
generate-data -> pretrain -> train-adaptor -> restore / evaluate /
prompt-walk, plus parse-prompt for grammar validation.

Every training subcommand writes its resolved config into the run
directory; the run root defaults to ./runs and can be moved with the
TIP_MICRO_RUNS environment variable.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import checkpoint, degrade, evaluation, pipeline, procgen
from .config import RunConfig, SamplerConfig
from .errors import TipError
from .sampler import TipModels, restore as restore_image


def _load_config(config_path: str | None) -> RunConfig:
    if config_path:
        return RunConfig.from_json_file(config_path)
    return RunConfig()


def _resolve_run_dir(run: str) -> Path:
    p = Path(run)
    if not p.is_absolute() and len(p.parts) == 1:
        p = pipeline.runs_root() / p
    return p


def _open_run(run: str, cfg: RunConfig) -> Path:
    run_dir = _resolve_run_dir(run)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    return run_dir


def _logger(run_dir: Path):
    log_path = run_dir / "log.txt"

    def log(msg: str) -> None:
        click.echo(msg)
        with open(log_path, "a") as fh:
            fh.write(msg + "\n")

    return log


@click.group()
def cli():
    """Desk-scale text-driven image restoration."""


@cli.command("generate-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=None, type=int, help="Total sample count (default from config).")
@click.option("--seed", default=None, type=int)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def generate_data(out, count, seed, config_path):
    """Generate the procedural captioned dataset."""
    cfg = _load_config(config_path)
    if seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
    n = count if count is not None else cfg.train.dataset_size + cfg.train.heldout_size
    manifest = procgen.gen_dataset(n, cfg.train.seed, out, cfg.gen)
    click.echo(f"wrote {manifest.count} samples to {out}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--run", required=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int, help="Override both autoencoder and diffusion step counts.")
def pretrain(data, run, config_path, steps):
    """Pretrain the backbone (autoencoder + text-conditional prior) and freeze it."""
    cfg = _load_config(config_path)
    if steps is not None:
        cfg.train = dataclasses.replace(cfg.train, ae_steps=steps, diffusion_steps=steps)
    run_dir = _open_run(run, cfg)
    log = _logger(run_dir)
    train, _ = pipeline.load_or_generate_dataset(Path(data), cfg)
    backbone = pipeline.pretrain(train, cfg, log)
    out = run_dir / "backbone.ckpt"
    checkpoint.save_backbone(out, backbone, cfg)
    log(f"backbone checkpoint: {out} (checksum {backbone.checksum[:12]})")


@cli.command("train-adaptor")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path())
@click.option("--run", required=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
def train_adaptor(data, backbone_path, run, config_path, steps):
    """Train the restoration adaptor against a frozen backbone."""
    backbone, cfg = checkpoint.load_backbone(backbone_path)
    if config_path:
        cfg = _load_config(config_path)
    if steps is not None:
        cfg.train = dataclasses.replace(cfg.train, adaptor_steps=steps)
    run_dir = _open_run(run, cfg)
    log = _logger(run_dir)
    train, _ = pipeline.load_or_generate_dataset(Path(data), cfg)
    adaptor = pipeline.train_adaptor(train, backbone, cfg, log)
    out = run_dir / "adaptor.ckpt"
    checkpoint.save_adaptor(out, adaptor, backbone, cfg)
    log(f"adaptor checkpoint: {out}")


def _load_models(backbone_path, adaptor_path) -> tuple[TipModels, RunConfig]:
    backbone, cfg = checkpoint.load_backbone(backbone_path)
    adaptor = checkpoint.load_adaptor(adaptor_path, backbone)
    return TipModels(backbone=backbone, adaptor=adaptor), cfg


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--semantic", default="")
@click.option("--restoration", default=degrade.BLIND_PROMPT)
@click.option("--backbone", "backbone_path", required=True, type=click.Path())
@click.option("--adaptor", "adaptor_path", required=True, type=click.Path())
@click.option("--steps", default=None, type=int)
@click.option("--guidance", default=None, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--output", required=True, type=click.Path())
def restore(input_path, semantic, restoration, backbone_path, adaptor_path, steps, guidance, seed, output):
    """Restore one degraded image under the given prompts."""
    if not Path(input_path).exists():
        raise TipError(f"missing input image: {input_path}")
    models, cfg = _load_models(backbone_path, adaptor_path)
    scfg = cfg.sampler
    if steps is not None:
        scfg = dataclasses.replace(scfg, steps=steps)
    if guidance is not None:
        scfg = dataclasses.replace(scfg, guidance=guidance)
    y = procgen.load_png(input_path)
    out = restore_image(y, semantic, restoration, models, scfg, seed)
    procgen.save_png(out, output)
    click.echo(f"restored {input_path} -> {output}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path())
@click.option("--adaptor", "adaptor_path", required=True, type=click.Path())
@click.option("--run", required=True)
@click.option("--count", default=50, type=int)
@click.option("--seed", default=0, type=int)
def evaluate(data, backbone_path, adaptor_path, run, count, seed):
    """Restore a held-out degraded set and emit metrics.json."""
    models, cfg = _load_models(backbone_path, adaptor_path)
    run_dir = _open_run(run, cfg)
    _, heldout = pipeline.load_or_generate_dataset(Path(data), cfg)
    heldout = heldout[:count]
    rng = np.random.default_rng(seed)
    ys, prompts = [], []
    for s in heldout:
        y, _, prompt = degrade.synth_training_pair(s.image, rng, cfg.degrade)
        ys.append(y)
        prompts.append(prompt.text)
    ys = np.stack(ys)
    clean = np.stack([s.image for s in heldout])
    restored = []
    for i in range(0, len(heldout), 25):
        restored.append(
            evaluation.restore_batch(
                ys[i : i + 25],
                [s.caption for s in heldout[i : i + 25]],
                prompts[i : i + 25],
                models,
                cfg.sampler,
                seed,
            )
        )
    restored = np.concatenate(restored)
    report = evaluation.paired_metrics(restored, clean)
    degraded_report = evaluation.paired_metrics(ys, clean)
    report.config = cfg.to_dict()
    report.save(run_dir / "metrics.json")
    click.echo(
        f"degraded psnr {degraded_report.mean_psnr:.2f} dB -> restored {report.mean_psnr:.2f} dB "
        f"(ssim {degraded_report.mean_ssim:.3f} -> {report.mean_ssim:.3f})"
    )


@cli.command("prompt-walk")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path())
@click.option("--adaptor", "adaptor_path", required=True, type=click.Path())
@click.option("--output", required=True, type=click.Path())
@click.option("--denoise", "denoise_strengths", default="0.06,0.12,0.18,0.24")
@click.option("--deblur", "deblur_strengths", default="1.0,2.0,3.0,4.0")
@click.option("--seed", default=0, type=int)
def prompt_walk(input_path, backbone_path, adaptor_path, output, denoise_strengths, deblur_strengths, seed):
    """Render a denoise x deblur prompt-walk grid."""
    models, cfg = _load_models(backbone_path, adaptor_path)
    y = procgen.load_png(input_path)
    denoise = [float(v) for v in denoise_strengths.split(",")]
    deblur = [float(v) for v in deblur_strengths.split(",")]
    grid = [
        [f"Deblur with sigma {b:.1f}; Denoise with sigma {n:.2f}" for n in denoise]
        for b in deblur
    ]
    img = evaluation.prompt_walk(models, y, grid, cfg.sampler, seed)
    img.save(output, format="PNG")
    click.echo(f"prompt walk grid: {output}")


@cli.command("parse-prompt")
@click.argument("text")
def parse_prompt_cmd(text):
    """Parse a restoration prompt and print the structured spec as JSON."""
    spec = degrade.parse_prompt(text)
    click.echo(json.dumps(spec.to_json_dict(), indent=2, sort_keys=True))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2 if isinstance(exc, click.UsageError) else 1
    except TipError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
