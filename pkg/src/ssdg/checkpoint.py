"""Checkpoint archive: ``manifest.json`` + one little-endian float32 blob per tensor.

Layout of the zip archive::

    manifest.json        {name: {"shape": [...], "dtype": "float32", "source_dtype": "..."}}
    meta.json            free-form run metadata (backbone config, tasks, ...)
    tensors/<name>.bin   row-major '<f4' bytes
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MANIFEST = "manifest.json"
META = "meta.json"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            manifest[name] = {"shape": list(arr.shape), "dtype": "float32",
                              "source_dtype": str(arr.dtype)}
            zf.writestr(f"tensors/{name}.bin", np.ascontiguousarray(arr, dtype="<f4").tobytes())
        zf.writestr(MANIFEST, json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr(META, json.dumps(meta or {}, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; integer tensors regain their original dtype."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read(MANIFEST))
        meta = json.loads(zf.read(META)) if META in zf.namelist() else {}
        tensors = {}
        for name, info in manifest.items():
            raw = np.frombuffer(zf.read(f"tensors/{name}.bin"), dtype="<f4")
            arr = raw.reshape(info["shape"]).astype(np.float32)
            t = torch.from_numpy(arr.copy())
            if info.get("source_dtype", "float32").startswith("int"):
                t = t.round().to(torch.int64)
            tensors[name] = t
    return tensors, meta


def prefixed(state: dict, prefix: str) -> dict:
    """Sub-dictionary of ``state`` under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}
