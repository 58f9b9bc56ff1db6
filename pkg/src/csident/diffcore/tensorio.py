"""Flat named-tensor container: a JSON manifest next to one raw little-endian float64 blob."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch


def save_named_tensors(stem: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    with open(bin_path, "wb") as fh:
        for name in sorted(tensors):
            t = tensors[name]
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(raw)
    manifest = {"dtype": "<f8", "nbytes": offset, "tensors": entries}
    json_path.write_text(json.dumps(manifest, indent=1))
    return json_path, bin_path


def load_named_tensors(stem: str | Path) -> dict[str, torch.Tensor]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["nbytes"]:
        raise ValueError(f"{stem}.bin has {len(blob)} bytes, manifest says {manifest['nbytes']}")
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float64))
    return out
