"""Single-file tensor container.

Layout (all integers little-endian)::

    magic        8 bytes   b"S2UXCKPT"
    version      uint32
    header_len   uint64
    header       UTF-8 JSON, sorted keys: {"meta": {...}, "tensors": [
                     {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw little-endian tensor data, offsets relative to payload start
    crc32        uint32 over every preceding byte

Writes go through a temporary file and ``os.replace``; reads validate the
whole file before returning anything.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"S2UXCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def encode_tensors(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, torch.Tensor], dict]:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + 4:
        raise CheckpointError(f"{source}: file too short to be a checkpoint ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic header")
    version, header_len = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{source}: checksum mismatch (truncated or corrupted file)")
    try:
        header = json.loads(blob[fixed:fixed + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc
    payload = blob[fixed + header_len:-4]
    tensors = {}
    for rec in header["tensors"]:
        start, n = rec["offset"], rec["nbytes"]
        if start + n > len(payload) or rec["dtype"] not in _TORCH:
            raise CheckpointError(f"{source}: tensor table entry {rec['name']} is invalid")
        arr = np.frombuffer(payload[start:start + n], dtype=rec["dtype"]).reshape(rec["shape"])
        tensors[rec["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, header["meta"]


def write_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    path = Path(path)
    blob = encode_tensors(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_tensors(blob, str(path))
