"""Checkpoint directories: ``manifest.json`` plus one raster file per parameter."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import BranchConfig, build_model
from .raster import read_raster, write_raster

FORMAT_VERSION = 1


class CheckpointError(DataError):
    pass


def save_checkpoint(model, path, *, seed: int = 0, epoch: int = 0, normalization=None, extra=None) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    params = {}
    for name, tensor in model.named_parameters().items():
        fname = f"{name}.raw"
        write_raster(tensor.data, path / fname)
        params[name] = {"file": fname, "shape": list(tensor.shape)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": model.task,
        "architecture": model.config.to_json(),
        "band_count": model.config.in_channels,
        "seed": int(seed),
        "epoch": int(epoch),
        "normalization": normalization if normalization is not None else "per-image per-band standardization",
        "parameters": params,
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_checkpoint_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise CheckpointError(f"missing checkpoint manifest in {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: {exc}") from None
    for key in ("task", "architecture", "parameters"):
        if key not in manifest:
            raise CheckpointError(f"checkpoint manifest lacks {key!r}")
    return manifest


def load_checkpoint(path, expected_task: str | None = None):
    """Rebuild the model stored at ``path``.

    Raises :class:`CheckpointError` on task mismatch, on a manifest whose
    shapes disagree with its architecture, or on files that disagree with the
    manifest.
    """
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    task = manifest["task"]
    if expected_task is not None and task != expected_task:
        raise CheckpointError(f"checkpoint holds a {task!r} model, expected {expected_task!r}")
    try:
        arch = manifest["architecture"]
        config = BranchConfig(arch["in_channels"], tuple(arch["filters_per_layer"]), arch["kernel_size"])
        model = build_model(task, config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid architecture in checkpoint: {exc}") from None

    named = model.named_parameters()
    stored = manifest["parameters"]
    if set(stored) != set(named):
        raise CheckpointError(f"parameter names {sorted(stored)} do not match a {task} model")
    for name, tensor in named.items():
        entry = stored[name]
        if list(entry["shape"]) != list(tensor.shape):
            raise CheckpointError(f"{name}: manifest shape {entry['shape']} != architecture {list(tensor.shape)}")
        data = read_raster(path / entry["file"])
        if list(data.shape) != list(entry["shape"]):
            raise CheckpointError(f"{name}: file shape {list(data.shape)} != manifest {entry['shape']}")
        tensor.data[...] = data
    model.checkpoint_info = {k: manifest.get(k) for k in ("seed", "epoch", "normalization", "extra")}
    return model


def copy_parameters(src, dst) -> None:
    for (name, a), (_, b) in zip(src.named_parameters().items(), dst.named_parameters().items()):
        b.data[...] = a.data


def snapshot(model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_parameters().items()}


def restore(model, snap: dict[str, np.ndarray]) -> None:
    for name, t in model.named_parameters().items():
        t.data[...] = snap[name]
