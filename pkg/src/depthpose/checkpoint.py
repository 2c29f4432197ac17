"""Self-describing checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header (kind, config, tensor table) and the raw little-endian float32
tensor bytes back to back.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

MAGIC = b"DPCKPT1\n"


def save_checkpoint(path, kind: str, config: dict, state_dict) -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, tensor in state_dict.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format_version": 1, "kind": kind, "config": config,
                         "dtype": "<f4", "tensors": table}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path):
    """Return ``(kind, config, state_dict)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    data = memoryview(raw)[start + hlen:]
    state = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(data[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f4")
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header["kind"], header["config"], state


def expect_kind(path, kind: str):
    found, config, state = load_checkpoint(path)
    if found != kind:
        raise ConfigError(f"{path} holds a '{found}' checkpoint, expected '{kind}'")
    return config, state
