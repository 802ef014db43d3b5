"""Network checkpoints: one ``EMT1`` file per tensor plus a JSON manifest."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import torch

from .tensorio import atomic_write_bytes, load_tensor, save_tensor


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, state: dict[str, dict], meta: dict | None = None) -> None:
    """``state`` maps a group name (e.g. ``"F"``) to a torch state dict."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    index = {}
    n = 0
    for group, sd in state.items():
        for key, t in sd.items():
            fname = f"t{n:04d}.emt"
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            save_tensor(tmp / fname, arr)
            index[f"{group}/{key}"] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            n += 1
    atomic_write_bytes(tmp / "manifest.json", (json.dumps({"tensors": index, "meta": meta or {}}, indent=1, sort_keys=True) + "\n").encode())
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def load_checkpoint(path) -> tuple[dict[str, dict], dict]:
    path = Path(path)
    man = path / "manifest.json"
    if not man.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(man) as fh:
        manifest = json.load(fh)
    state: dict[str, dict] = {}
    for name, entry in manifest["tensors"].items():
        group, key = name.split("/", 1)
        arr = load_tensor(path / entry["file"], np.dtype(entry["dtype"]))
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, manifest says {entry['shape']}")
        state.setdefault(group, {})[key] = torch.from_numpy(arr)
    return state, manifest["meta"]
