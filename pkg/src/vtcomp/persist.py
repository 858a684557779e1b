"""Bit-exact checkpoint persistence: a directory of float32 blobs + manifest.

Format (the repo's wire contract):
  <dir>/manifest.json   config, role, compression spec, step, parent run id,
                        rng state, and per-parameter {name, shape, sha256}
  <dir>/<name>.bin      one blob per tensor: little-endian float32, row-major,
                        filename = parameter path with "/" -> "__"
  <dir>/COMMIT          zero-byte sentinel written last; absent means the
                        checkpoint is incomplete

Blobs are streamed one tensor at a time on both save and load, so merging
never holds more than one tensor pair in memory beyond the model itself.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .compression import CompressionSpec
from .model import ModelConfig, TinyVLM

FORMAT_VERSION = 1
COMMIT_SENTINEL = "COMMIT"


class IncompleteCheckpointError(RuntimeError):
    pass


class CheckpointIntegrityError(RuntimeError):
    pass


class CheckpointShapeError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    """An in-memory named-tensor map plus its manifest."""

    manifest: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return sorted(self.tensors)


def blob_name(param_name: str) -> str:
    return param_name.replace("/", "__") + ".bin"


def config_digest(config: ModelConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().to(torch.float32).numpy()
    return arr.astype("<f4", copy=False).tobytes()


def checkpoint_from_model(model: TinyVLM, step: int = 0,
                          parent_run_id: str = "", rng_state: str | None = None) -> Checkpoint:
    tensors = {n: p.detach().clone() for n, p in model.named_parameters()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_digest": config_digest(model.config),
        "role": model.role,
        "compression": model.compression.to_dict() if model.compression else None,
        "step": step,
        "parent_run_id": parent_run_id,
        "rng_state": rng_state,
        "params": [
            {"name": n, "shape": list(t.shape)} for n, t in sorted(tensors.items())
        ],
    }
    return Checkpoint(manifest=manifest, tensors=tensors)


def save_checkpoint(source: TinyVLM | Checkpoint, path: str | Path, step: int | None = None,
                    parent_run_id: str | None = None, rng_state: str | None = None) -> Path:
    """Write a checkpoint directory; the COMMIT sentinel lands last."""
    cp = source if isinstance(source, Checkpoint) else checkpoint_from_model(source)
    manifest = dict(cp.manifest)
    if step is not None:
        manifest["step"] = step
    if parent_run_id is not None:
        manifest["parent_run_id"] = parent_run_id
    if rng_state is not None:
        manifest["rng_state"] = rng_state
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    commit = path / COMMIT_SENTINEL
    if commit.exists():
        commit.unlink()
    entries = []
    for name in sorted(cp.tensors):
        data = _tensor_bytes(cp.tensors[name])
        (path / blob_name(name)).write_bytes(data)
        entries.append(
            {
                "name": name,
                "shape": list(cp.tensors[name].shape),
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        )
    manifest["params"] = entries
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    commit.touch()
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint directory (hashes, shapes, sentinel)."""
    path = Path(path)
    if not (path / COMMIT_SENTINEL).exists():
        raise IncompleteCheckpointError(f"incomplete checkpoint: {path}")
    with open(path / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    tensors = {}
    for entry in manifest["params"]:
        name, shape = entry["name"], entry["shape"]
        blob = (path / blob_name(name)).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CheckpointIntegrityError(f"hash mismatch for tensor {name}")
        expected = int(np.prod(shape)) if shape else 1
        if len(blob) != 4 * expected:
            raise CheckpointShapeError(
                f"shape mismatch for tensor {name}: manifest {shape} "
                f"vs {len(blob) // 4} stored values"
            )
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    return Checkpoint(manifest=manifest, tensors=tensors)


def model_from_checkpoint(cp: Checkpoint) -> TinyVLM:
    """Rebuild a model handle and load the stored values into it."""
    config = ModelConfig.from_dict(cp.manifest["config"])
    compression = (
        CompressionSpec.from_dict(cp.manifest["compression"])
        if cp.manifest.get("compression")
        else None
    )
    # values are overwritten below; the fixed generator just keeps the build
    # path off the global RNG
    model = TinyVLM(config, role=cp.manifest["role"], compression=compression,
                    generator=torch.Generator().manual_seed(0))
    load_into_model(model, cp)
    if model.role == "student":
        for p in model.vit.parameters():
            p.requires_grad_(False)
        for p in model.decoder.parameters():
            p.requires_grad_(False)
    return model


def load_into_model(model: TinyVLM, cp: Checkpoint) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(cp.tensors):
        missing = sorted(set(own) ^ set(cp.tensors))
        raise CheckpointShapeError(f"parameter set mismatch, first offender: {missing[0]}")
    for name in sorted(own):
        if tuple(own[name].shape) != tuple(cp.tensors[name].shape):
            raise CheckpointShapeError(
                f"shape mismatch for tensor {name}: model {tuple(own[name].shape)} "
                f"vs checkpoint {tuple(cp.tensors[name].shape)}"
            )
        with torch.no_grad():
            own[name].copy_(cp.tensors[name])
