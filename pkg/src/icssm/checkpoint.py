"""Model serialization: a JSON header describing the configuration and
tensor table, followed by a raw little-endian payload.

Round trips are byte-exact at float64; float32 storage is available for
smaller artifacts (lossy, flagged in the header).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ICMambaModel, ModelConfig

MAGIC = b"ICSM"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ICMambaModel, dtype: str = "float64") -> None:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype '{dtype}'")
    np_dtype = np.dtype(_DTYPES[dtype])
    table = []
    payload = bytearray()
    for p in model.parameters():
        raw = np.ascontiguousarray(p.data, dtype=np_dtype).tobytes()
        table.append({
            "name": p.name,
            "shape": list(p.data.shape),
            "dtype": dtype,
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload += raw
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_json(),
        "tensors": table,
    }).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path) -> ICMambaModel:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format version {header.get('format_version')}")
    config = ModelConfig.from_json(header["model_config"])
    model = ICMambaModel(config, seed=0)
    payload = blob[12 + hlen:]
    by_name = {p.name: p for p in model.parameters()}
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        p = by_name.get(name)
        if p is None:
            raise CheckpointError(f"unknown tensor '{name}' in checkpoint")
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated payload for tensor '{name}'")
        data = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
        if data.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': {data.shape} vs {p.data.shape}")
        p.data = data.astype(np.float64)
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return model
