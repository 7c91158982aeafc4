"""Checkpoint format: magic, version byte, JSON header, raw float32 arrays.

Layout: b"MIMBD01" | version 0x01 | uint32 LE header length | UTF-8 JSON
header | little-endian float32 arrays concatenated in header order. The
header carries the model config and the named parameter list with shapes, so
a load rebuilds the exact model and round-trips bit-exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import FormatError
from .model import EncoderConfig, MIMModel

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"MIMBD01"
VERSION = 1


def save_checkpoint(model: MIMModel, path: str, extra: dict | None = None) -> None:
    params = model.params()
    header = {
        "config": asdict(model.config),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for p in params:
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> MIMModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, not a model checkpoint")
    off = len(MAGIC)
    if len(blob) < off + 5:
        raise FormatError(f"{path}: truncated at offset {len(blob)}")
    version = blob[off]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset {off}")
    off += 1
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise FormatError(f"{path}: truncated header at offset {off}")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header at offset {off}: {e}") from e
    off += hlen
    config = EncoderConfig(**header["config"])
    model = MIMModel(config, seed=0)
    params = model.params()
    names = {p.name: p for p in params}
    if [p["name"] for p in header["params"]] != [p.name for p in params]:
        raise FormatError(f"{path}: parameter list does not match model config")
    for meta in header["params"]:
        p = names[meta["name"]]
        shape = tuple(meta["shape"])
        if shape != p.value.shape:
            raise FormatError(
                f"{path}: {meta['name']} has shape {shape}, expected {p.value.shape}")
        nbytes = int(np.prod(shape)) * 4
        if len(blob) < off + nbytes:
            raise FormatError(f"{path}: truncated array data at offset {off}")
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f4").reshape(shape)
        p.value[...] = arr
        off += nbytes
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    return model
