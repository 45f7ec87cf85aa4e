"""End-to-end training: autoencoder, text-conditional diffusion prior,
then the restoration adaptor against the frozen backbone.

All loops are CPU-sized: latents are precomputed once, degradation pairs
are synthesized on the fly per step, and every loop is reproducible from
(config, seed).
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import degrade, procgen, textenc
from .adaptor import Adaptor, tip_forward
from .config import RunConfig
from .diffcore import (
    VAE,
    Backbone,
    NoiseSchedule,
    UNet,
    add_noise,
    check_finite,
    freeze,
    register_optimizer,
)
from .errors import DatasetError
from .textenc import TextEncoder, Vocabulary, build_vocab, tokenize


def runs_root() -> Path:
    return Path(os.environ.get("TIP_MICRO_RUNS", "runs"))


def prompt_corpus(cfg: RunConfig) -> list[str]:
    """Every string the tokenizer must cover: captions, restoration verbs,
    digits as they appear in rendered prompts."""
    corpus = [" ".join(procgen.caption_vocabulary(cfg.gen))]
    corpus.append(degrade.BLIND_PROMPT)
    corpus += [
        "Deblur with sigma 3.0",
        "Upsample to 6.0x",
        "Denoise with sigma 0.06",
        "Dejpeg with quality 30",
    ]
    return corpus


def build_vocab_for(cfg: RunConfig) -> Vocabulary:
    return build_vocab(prompt_corpus(cfg))


def new_backbone(cfg: RunConfig, vocab: Vocabulary | None = None, seed: int | None = None) -> Backbone:
    if seed is not None:
        torch.manual_seed(seed)
    vocab = vocab or build_vocab_for(cfg)
    return Backbone(
        vae=VAE(cfg.model),
        unet=UNet(cfg.model, cfg.text),
        text_encoder=TextEncoder(len(vocab), cfg.text),
        schedule=NoiseSchedule.from_config(cfg.model),
        vocab=vocab,
        config=cfg.model,
        text_config=cfg.text,
    )


def _image_tensor(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)


def train_autoencoder(vae: VAE, images: torch.Tensor, cfg: RunConfig, log=None) -> None:
    gen = torch.Generator().manual_seed(cfg.train.seed)
    opt = register_optimizer(vae.parameters(), cfg.train.ae_lr)
    n = images.shape[0]
    # Per-channel 3x3 Laplacian for the high-pass reconstruction term.
    lap = torch.tensor([[0.0, 1, 0], [1, -4, 1], [0, 1, 0]]).view(1, 1, 3, 3).repeat(3, 1, 1, 1)
    hp_w = cfg.train.ae_highpass_weight
    vae.train()
    for step in range(cfg.train.ae_steps):
        idx = torch.randint(0, n, (cfg.train.batch_size,), generator=gen)
        x = images[idx]
        recon = vae.decode_unclamped(vae.encode(x))
        loss = F.mse_loss(recon, x)
        if hp_w:
            loss = loss + hp_w * F.mse_loss(
                F.conv2d(recon, lap, padding=1, groups=3), F.conv2d(x, lap, padding=1, groups=3)
            )
        loss = check_finite(loss, "autoencoder")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (step % cfg.train.log_every == 0 or step + 1 == cfg.train.ae_steps):
            log(f"ae step {step} loss {loss.item():.5f}")
    vae.eval()
    # Calibrate whitening on a strided slice so it sees the whole tensor
    # (which may be clean renders followed by degraded variants).
    vae.calibrate_latents(images[:: max(1, n // 512)][:512])


@torch.no_grad()
def encode_latents(vae: VAE, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    out = [vae.encode(images[i : i + batch]) for i in range(0, images.shape[0], batch)]
    return torch.cat(out)


def apply_semantic_dropout(
    ids: torch.Tensor, mask: torch.Tensor, empty: textenc.TokenSequence, p: float, generator=None
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Replace each caption by the empty prompt with probability ``p``."""
    b = ids.shape[0]
    drop = torch.rand(b, generator=generator) < p
    ids = ids.clone()
    mask = mask.clone()
    ids[drop] = empty.ids
    mask[drop] = empty.mask
    return ids, mask, int(drop.sum())


def pretrain_step(
    unet: UNet,
    text_encoder: TextEncoder,
    z0: torch.Tensor,
    ids: torch.Tensor,
    mask: torch.Tensor,
    schedule: NoiseSchedule,
    opt: torch.optim.Optimizer,
    generator=None,
) -> float:
    """One optimizer step of the noise-matching objective."""
    b = z0.shape[0]
    t = torch.randint(0, schedule.timesteps, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator)
    z_t = add_noise(z0, t, eps, schedule)
    context = text_encoder(ids)
    pred = unet(z_t, t, context, mask)
    loss = check_finite(F.mse_loss(pred, eps), "diffusion")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def pretrain(samples, cfg: RunConfig, log=None) -> Backbone:
    """Stage 0 (autoencoder) + stage 1 (text-conditional diffusion), then freeze."""
    backbone = new_backbone(cfg, seed=cfg.train.seed)
    images = _image_tensor(samples)
    ae_images = images
    if cfg.train.ae_degraded_variants:
        # The prior must cover degraded appearance, not just pristine
        # renders: the restoration sampler can only retain residual
        # corruption (partial restoration) if such images are inside the
        # autoencoder's and denoiser's training distribution. A degraded
        # variant still matches its caption — it is the same scene at
        # lower quality — so the variants train with the same captions.
        rng = np.random.default_rng(cfg.train.seed + 5)
        degraded = np.stack(
            [degrade.synth_training_pair(s.image, rng, cfg.degrade)[0] for s in samples]
        )
        ae_images = torch.cat([images, torch.from_numpy(degraded.astype(np.float32)).permute(0, 3, 1, 2)])
    t0 = time.time()
    train_autoencoder(backbone.vae, ae_images, cfg, log)
    if log:
        log(f"autoencoder trained in {time.time() - t0:.0f}s")

    latents = encode_latents(backbone.vae, ae_images)
    max_tok = cfg.text.max_tokens
    tok = [tokenize(s.caption, backbone.vocab, max_tok) for s in samples]
    all_ids = torch.stack([t.ids for t in tok])
    all_mask = torch.stack([t.mask for t in tok])
    if latents.shape[0] == 2 * all_ids.shape[0]:
        all_ids = torch.cat([all_ids, all_ids])
        all_mask = torch.cat([all_mask, all_mask])
    empty = tokenize("", backbone.vocab, max_tok)

    gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    params = list(backbone.unet.parameters()) + list(backbone.text_encoder.parameters())
    opt = register_optimizer(params, cfg.train.diffusion_lr)
    n = latents.shape[0]
    t0 = time.time()
    for step in range(cfg.train.diffusion_steps):
        idx = torch.randint(0, n, (cfg.train.batch_size,), generator=gen)
        ids, mask, _ = apply_semantic_dropout(
            all_ids[idx], all_mask[idx], empty, cfg.train.semantic_dropout, gen
        )
        loss = pretrain_step(
            backbone.unet, backbone.text_encoder, latents[idx], ids, mask, backbone.schedule, opt, gen
        )
        if log and (step % cfg.train.log_every == 0 or step + 1 == cfg.train.diffusion_steps):
            log(f"diffusion step {step} loss {loss:.4f}")
    if log:
        log(f"diffusion trained in {time.time() - t0:.0f}s")
    return freeze(backbone)


def _strength_split_pair(
    x: np.ndarray, rng: np.random.Generator, cfg: RunConfig
) -> tuple[np.ndarray, str, np.ndarray]:
    """Synthesize a pair whose prompt removes a *quota* of each corruption.

    Gaussian blur widths and noise variances add in quadrature, so a total
    strength can be split into a prompted part and a kept remainder: the
    input carries the total, the prompt names the prompted part, and the
    target keeps sqrt(max(total^2 - prompted^2, 0)).

    Two sampling details make the prompt a *control* rather than a label:

    - The prompted strength is drawn independently of the total — including
      over-prompting, where the target is simply fully restored. The
      prompted value then carries no information about how corrupted the
      input is; otherwise the model shortcuts "stronger prompt ⇒ the input
      was more corrupted ⇒ keep more", inverting strength control.
    - Each corruption can also be present but entirely unprompted (kept in
      full). That teaches "leave unmentioned corruption alone", which is
      what makes prompted tasks decoupled.
    - The kept noise reuses the *same* noise field as the input, scaled
      down. With an independent draw the kept noise would be unpredictable
      from (input, prompt), so under the mean-seeking regression loss the
      prompted sigma could not reduce the error at all and the number
      would never be learned; with a shared field the target is a
      deterministic function of input and prompt.
    """
    dcfg = cfg.degrade
    while True:
        # Per stage: 0 = absent, 1 = prompted split, 2 = present unprompted.
        blur_state = int(rng.choice(3, p=[0.3, 0.45, 0.25]))
        noise_state = int(rng.choice(3, p=[0.3, 0.45, 0.25]))
        if blur_state == 1 or noise_state == 1:
            break
    stages = []
    target, y_base = x, x
    if blur_state:
        lo, hi = dcfg.blur_sigma_range
        if blur_state == 1:
            total = float(rng.uniform(lo, hi + 1.0))
            prompted = float(rng.uniform(lo, hi))
            kept = float(np.sqrt(max(total * total - prompted * prompted, 0.0)))
            stages.append(degrade.DegradationStage(degrade.StageKind.BLUR, prompted))
        else:
            total = kept = float(rng.uniform(lo, hi))
        target = degrade.apply_gaussian_blur(x, kept)
        y_base = degrade.apply_gaussian_blur(x, total)
    y = y_base
    if noise_state:
        lo, hi = dcfg.noise_sigma_range
        if noise_state == 1:
            total = float(rng.uniform(lo + 0.03, hi + 0.05))
            prompted = float(rng.uniform(lo, hi))
            kept = float(np.sqrt(max(total * total - prompted * prompted, 0.0)))
            stages.append(degrade.DegradationStage(degrade.StageKind.NOISE, prompted))
        else:
            total = kept = float(rng.uniform(lo + 0.03, hi))
        field = rng.standard_normal(x.shape).astype(np.float32)
        target = np.clip(target + kept * field, 0.0, 1.0)
        y = np.clip(y_base + total * field, 0.0, 1.0)
    prompt = degrade.render_prompt(degrade.DegradationSpec(stages=tuple(stages)))
    return y, prompt.text, target


def synth_batch(samples, idx, cfg: RunConfig, rng: np.random.Generator):
    """Degrade a batch of clean samples per the training mixing rules.

    With probability ``residual_target_prob`` a pair comes from
    ``_strength_split_pair`` instead: its target retains the unprompted
    remainder of the corruption. Without such pairs the prompt is
    redundant with the input (the full extent of the degradation is
    always visible there) and the adaptor learns to ignore it, which
    forfeits prompted strength control.

    Returns the degraded inputs, the prompts, and a list of
    (batch position, target image) overrides for pairs whose target is not
    the stored clean sample.
    """
    ys, prompts, overrides = [], [], []
    for pos, i in enumerate(idx):
        x = samples[i].image
        if rng.random() < cfg.train.residual_target_prob:
            y, text, target = _strength_split_pair(x, rng, cfg)
            overrides.append((pos, target))
        else:
            y, _, prompt = degrade.synth_training_pair(x, rng, cfg.degrade)
            text = prompt.text
        ys.append(y)
        prompts.append(text)
    return np.stack(ys), prompts, overrides


def adaptor_train_step(
    batch,
    backbone: Backbone,
    adaptor: Adaptor,
    opt: torch.optim.Optimizer,
    generator=None,
) -> float:
    """One optimizer step on the adaptor; backbone stays untouched."""
    backbone.assert_frozen()
    ys, cs_ids, cs_mask, cr_ids, cr_mask, z0 = batch
    b = z0.shape[0]
    t = torch.randint(0, backbone.schedule.timesteps, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator)
    z_t = add_noise(z0, t, eps, backbone.schedule)
    with torch.no_grad():
        cs_emb = backbone.text_encoder(cs_ids)
        cr_emb = backbone.text_encoder(cr_ids)
    pred = tip_forward(z_t, t, ys, cs_emb, cs_mask, cr_emb, cr_mask, backbone, adaptor)
    loss = check_finite(F.mse_loss(pred, eps), "adaptor")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def train_adaptor(samples, backbone: Backbone, cfg: RunConfig, log=None) -> Adaptor:
    backbone.assert_frozen()
    torch.manual_seed(cfg.train.seed + 2)
    adaptor = Adaptor(cfg.model, cfg.text)
    adaptor.init_from_backbone(backbone.unet)
    images = _image_tensor(samples)
    latents = encode_latents(backbone.vae, images)
    max_tok = cfg.text.max_tokens
    cap_tok = [tokenize(s.caption, backbone.vocab, max_tok) for s in samples]
    cap_ids = torch.stack([t.ids for t in cap_tok])
    cap_mask = torch.stack([t.mask for t in cap_tok])
    empty = tokenize("", backbone.vocab, max_tok)

    gen = torch.Generator().manual_seed(cfg.train.seed + 3)
    rng = np.random.default_rng(cfg.train.seed + 4)
    opt = register_optimizer(adaptor.parameters(), cfg.train.adaptor_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.train.adaptor_steps, eta_min=cfg.train.adaptor_lr * cfg.train.adaptor_lr_floor
    )
    n = latents.shape[0]
    t0 = time.time()
    for step in range(cfg.train.adaptor_steps):
        idx = torch.randint(0, n, (cfg.train.batch_size,), generator=gen).tolist()
        ys_np, prompts, overrides = synth_batch(samples, idx, cfg, rng)
        z0 = latents[idx]
        if overrides:
            z0 = z0.clone()
            targets = torch.from_numpy(
                np.stack([im for _, im in overrides]).astype(np.float32)
            ).permute(0, 3, 1, 2)
            with torch.no_grad():
                enc = backbone.vae.encode(targets)
            for j, (pos, _) in enumerate(overrides):
                z0[pos] = enc[j]
        ys = torch.from_numpy(ys_np.astype(np.float32)).permute(0, 3, 1, 2)
        cr_tok = [tokenize(p, backbone.vocab, max_tok) for p in prompts]
        cr_ids = torch.stack([t.ids for t in cr_tok])
        cr_mask = torch.stack([t.mask for t in cr_tok])
        cs_ids, cs_mask, _ = apply_semantic_dropout(
            cap_ids[idx], cap_mask[idx], empty, cfg.train.semantic_dropout, gen
        )
        loss = adaptor_train_step(
            (ys, cs_ids, cs_mask, cr_ids, cr_mask, z0), backbone, adaptor, opt, gen
        )
        sched.step()
        if log and (step % cfg.train.log_every == 0 or step + 1 == cfg.train.adaptor_steps):
            log(f"adaptor step {step} loss {loss:.4f}")
    if log:
        log(f"adaptor trained in {time.time() - t0:.0f}s")
    backbone.verify_checksum()
    return adaptor


def load_or_generate_dataset(data_dir: Path, cfg: RunConfig):
    """Dataset of train + held-out samples under ``data_dir``."""
    total = cfg.train.dataset_size + cfg.train.heldout_size
    if (data_dir / "manifest.jsonl").exists():
        manifest = procgen.load_manifest(data_dir)
        if manifest.count != total:
            raise DatasetError(
                f"dataset at {data_dir} has {manifest.count} samples, config wants {total}"
            )
    else:
        manifest = procgen.gen_dataset(total, cfg.train.seed, data_dir, cfg.gen)
    samples = procgen.load_samples(manifest)
    return samples[: cfg.train.dataset_size], samples[cfg.train.dataset_size :]
