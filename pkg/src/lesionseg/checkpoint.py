"""Versioned ``.npz`` checkpoints.

A checkpoint holds a JSON metadata record (format tag, version, config echo,
epoch) under ``__meta__``, the model state under ``model/<name>`` and the
momentum buffers under ``momentum/<index>``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

FORMAT_TAG = "lesionseg-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, config: dict, epoch: int, momentum: Optional[Dict[str, torch.Tensor]] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT_TAG, "version": FORMAT_VERSION, "config": config, "epoch": epoch,
            "extra": extra or {}}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, value in model.state_dict().items():
        arrays[f"model/{name}"] = value.detach().cpu().numpy()
    for key, value in (momentum or {}).items():
        arrays[f"momentum/{key}"] = value.detach().cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> dict:
    """Return ``{"meta", "model", "momentum"}``; validates the format tag and version."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: unexpected format tag {meta.get('format')!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    model = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    momentum = {k[len("momentum/"):]: v for k, v in arrays.items() if k.startswith("momentum/")}
    return {"meta": meta, "model": model, "momentum": momentum}


def shape_diff(model, state: Dict[str, np.ndarray]) -> list:
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in state.items()}
    diff = [f"missing {k} {expected[k]}" for k in sorted(set(expected) - set(found))]
    diff += [f"unexpected {k} {found[k]}" for k in sorted(set(found) - set(expected))]
    diff += [f"{k}: checkpoint {found[k]} vs model {expected[k]}"
             for k in sorted(set(expected) & set(found)) if expected[k] != found[k]]
    return diff


def load_state(model, state: Dict[str, np.ndarray]) -> None:
    diff = shape_diff(model, state)
    if diff:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(diff))
    current = model.state_dict()
    model.load_state_dict({k: torch.as_tensor(v, dtype=current[k].dtype) for k, v in state.items()})
