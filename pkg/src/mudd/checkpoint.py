"""Checkpoints: a JSON manifest plus one little-endian tensor blob.

Layout of ``<dir>``::

    manifest.json   {"format", "config", "precision", "tensors": [...], "meta"}
    tensors.bin     raw concatenation of the tensors in manifest order

Each tensor entry records name, shape, dtype, byte offset and byte length.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import Model, build_model

FORMAT = "mudd-ckpt-1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path: str | os.PathLike, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as f:
        for name, p in model.named_parameters().items():
            arr = np.require(p.data, dtype=p.data.dtype.newbyteorder("<"), requirements="C")
            raw = arr.tobytes()
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            })
            f.write(raw)
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "precision": model.config.precision,
        "tensors": entries,
        "meta": meta or {},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {path}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path: str | os.PathLike) -> tuple[Model, dict]:
    """Rebuild the model described by the manifest and fill in its tensors.

    Returns ``(model, meta)``.
    """
    path = Path(path)
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config, 0)
    params = model.named_parameters()
    blob = (path / BLOB).read_bytes()
    seen = set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in params:
            raise CheckpointError(f"checkpoint tensor {name!r} not in model")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor {name!r} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])), offset=e["offset"])
        target = params[name]
        if tuple(e["shape"]) != target.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {e['shape']} vs {target.shape}")
        target.data = arr.reshape(e["shape"]).astype(target.dtype)
        target.zero_grad()
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    return model, manifest.get("meta", {})
