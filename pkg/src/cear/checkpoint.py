"""Versioned binary checkpoint format.

Layout: a magic line, one line of JSON header, then the raw little-endian
array bytes back to back. The header is written with sorted keys and carries
no timestamps, so identical contents give identical files.
"""

from __future__ import annotations

import json
from typing import Any, Dict, Mapping, Tuple

import numpy as np
import torch

MAGIC = b"CEAR-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, kind: str, meta: Mapping[str, Any], arrays: Mapping[str, Any]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": VERSION, "kind": kind, "meta": dict(meta), "arrays": entries}
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str, kind: str) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(f.readline().decode("utf-8"))
        data = f.read()
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    return header["meta"], arrays
