"""Checkpoint archives: a zip holding a JSON manifest plus raw
little-endian float32 buffers, with a SHA-256 checksum per buffer.

Adaptor checkpoints record the checksum of the backbone they were trained
against; loading one against a different backbone fails.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .diffcore import VAE, Backbone, NoiseSchedule, UNet, freeze, state_checksum
from .errors import CheckpointError
from .textenc import TextEncoder, Vocabulary

FORMAT = "tip-micro-checkpoint"
VERSION = 1


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        out[f"{prefix}.{name}"] = arr
    return out


def save_archive(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    config: dict,
    vocab: dict | None = None,
    meta: dict | None = None,
) -> None:
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "vocab": vocab,
        "meta": meta or {},
        "arrays": {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            raw = arr.tobytes()
            manifest["arrays"][name] = {
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
            zf.writestr(f"arrays/{name}.bin", raw)
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT:
                raise CheckpointError(f"not a {FORMAT} archive: {path}")
            arrays = {}
            for name, info in manifest["arrays"].items():
                raw = zf.read(f"arrays/{name}.bin")
                if hashlib.sha256(raw).hexdigest() != info["sha256"]:
                    raise CheckpointError(f"checksum mismatch for buffer {name!r} in {path}")
                arrays[name] = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    except (KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return manifest, arrays


def _load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing buffer {key!r}")
        state[name] = torch.from_numpy(arrays[key]).to(tensor.dtype).reshape(tensor.shape)
    module.load_state_dict(state)


def save_backbone(path: str | Path, backbone: Backbone, run_config: RunConfig) -> None:
    arrays = {}
    for prefix, mod in backbone.modules().items():
        arrays.update(_module_arrays(prefix, mod))
    meta = {
        "kind": "backbone",
        "frozen": backbone.frozen,
        "checksum": backbone.checksum or backbone.compute_checksum(),
    }
    save_archive(path, arrays, config=run_config.to_dict(), vocab=backbone.vocab.token_to_id, meta=meta)


def load_backbone(path: str | Path) -> tuple[Backbone, RunConfig]:
    manifest, arrays = load_archive(path)
    if manifest["meta"].get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    run_config = RunConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"])
    backbone = Backbone(
        vae=VAE(run_config.model),
        unet=UNet(run_config.model, run_config.text),
        text_encoder=TextEncoder(len(vocab), run_config.text),
        schedule=NoiseSchedule.from_config(run_config.model),
        vocab=vocab,
        config=run_config.model,
        text_config=run_config.text,
    )
    for prefix, mod in backbone.modules().items():
        _load_module(prefix, mod, arrays)
    if manifest["meta"].get("frozen"):
        freeze(backbone)
        if backbone.checksum != manifest["meta"]["checksum"]:
            raise CheckpointError(f"backbone checksum drifted across save/load for {path}")
    return backbone, run_config


def save_adaptor(path: str | Path, adaptor, backbone: Backbone, run_config: RunConfig) -> None:
    from .adaptor import Adaptor  # local import to avoid a cycle

    assert isinstance(adaptor, Adaptor)
    arrays = _module_arrays("adaptor", adaptor)
    meta = {
        "kind": "adaptor",
        "backbone_checksum": backbone.checksum or backbone.compute_checksum(),
        "adaptor_checksum": state_checksum(adaptor),
    }
    save_archive(path, arrays, config=run_config.to_dict(), meta=meta)


def load_adaptor(path: str | Path, backbone: Backbone):
    from .adaptor import Adaptor

    manifest, arrays = load_archive(path)
    if manifest["meta"].get("kind") != "adaptor":
        raise CheckpointError(f"{path} is not an adaptor checkpoint")
    expected = manifest["meta"]["backbone_checksum"]
    actual = backbone.checksum or backbone.compute_checksum()
    if expected != actual:
        raise CheckpointError(
            f"adaptor {path} was trained against backbone {expected[:12]}..., got {actual[:12]}..."
        )
    run_config = RunConfig.from_dict(manifest["config"])
    adaptor = Adaptor(run_config.model, run_config.text)
    _load_module("adaptor", adaptor, arrays)
    return adaptor
