"""Versioned checkpoint records.

A checkpoint is a ``torch.save`` archive of a plain dict::

    {"format": "ctrec-checkpoint", "version": 1, "variant": <str>,
     "config": {...}, "tensors": {name: Tensor}, "extra": {...}}

Tensors are stored verbatim so a save/load cycle is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .exceptions import CheckpointError

FORMAT = "ctrec-checkpoint"
VERSION = 1


def save_checkpoint(path, variant: str, config: dict, tensors: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "format": FORMAT,
        "version": VERSION,
        "variant": variant,
        "config": dict(config),
        "tensors": {k: v.detach().clone() for k, v in tensors.items()},
        "extra": dict(extra or {}),
    }
    torch.save(record, path)
    return path


def load_checkpoint(path, variant: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        record = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(record, dict) or record.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if record.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {record.get('version')}")
    if variant is not None and record["variant"] != variant:
        raise CheckpointError(f"{path}: expected variant {variant!r}, found {record['variant']!r}")
    return record
