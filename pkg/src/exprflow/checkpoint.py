"""Manifest + raw tensor checkpoint format.

A checkpoint directory holds ``manifest.json`` (hyperparameters, step,
seeds, free-form stats, and a tensor index) and ``tensors.f32``, the
concatenation of every tensor as little-endian float32 in index order.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

MANIFEST = "manifest.json"
TENSORS = "tensors.f32"


def save_tensors(directory: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    chunks = []
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    manifest = dict(meta)
    manifest["tensor_index"] = index
    manifest["dtype"] = "<f4"
    tmp = directory / (TENSORS + ".tmp")
    flat = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    flat.astype("<f4").tofile(tmp)
    os.replace(tmp, directory / TENSORS)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_tensors(directory: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    flat = np.fromfile(directory / TENSORS, dtype="<f4")
    tensors = {}
    for entry in manifest.pop("tensor_index"):
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = flat[entry["offset"] : entry["offset"] + n].reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest


def save_module(directory: str | os.PathLike, module: torch.nn.Module, meta: dict) -> None:
    save_tensors(directory, dict(module.state_dict()), meta)


def load_manifest(directory: str | os.PathLike) -> dict:
    manifest = json.loads((Path(directory) / MANIFEST).read_text())
    manifest.pop("tensor_index", None)
    return manifest
