"""Checkpoint archive: flat key -> array ``.npz`` plus an embedded JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"


class CheckpointError(RuntimeError):
    pass


def save_archive(path, tensors: dict, manifest: dict) -> Path:
    """Write ``tensors`` (torch or numpy) and ``manifest`` into one ``.npz`` file.

    The manifest gains ``version`` and a ``tensors`` table of shape/dtype headers.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for k, v in tensors.items():
        arrays[k] = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
    manifest = dict(manifest)
    manifest["version"] = FORMAT_VERSION
    manifest["tensors"] = {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()}
    arrays[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if MANIFEST_KEY not in z.files:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(bytes(z[MANIFEST_KEY]).decode())
        arrays = {k: z[k] for k in z.files if k != MANIFEST_KEY}
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    for k, hdr in manifest["tensors"].items():
        a = arrays.get(k)
        if a is None or list(a.shape) != hdr["shape"] or str(a.dtype) != hdr["dtype"]:
            raise CheckpointError(f"{path}: tensor {k!r} does not match its header")
    return arrays, manifest
