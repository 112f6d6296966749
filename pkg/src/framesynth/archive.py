"""Versioned tensor archive ("MSFS1") used for checkpoints and feature weights.

Layout::

    b"MSFS1\n"
    8-byte little-endian header length
    UTF-8 JSON header  {"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}, ...]}
    raw little-endian tensor payload, tensors packed in header order

The header is written with sorted keys so identical contents give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import ArchiveError

MAGIC = b"MSFS1\n"

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_NAMES = {v: k for k, v in _DTYPES.items()}


def dumps(tensors: Mapping[str, torch.Tensor], meta: Any = None) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _NAMES:
            raise ArchiveError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": _NAMES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, torch.Tensor], Any]:
    if not blob.startswith(MAGIC):
        raise ArchiveError("not an MSFS1 archive (bad magic header)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ArchiveError("truncated archive header")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise ArchiveError("truncated archive header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt archive header: {exc}") from exc
    pos += hlen
    payload = memoryview(blob)[pos:]
    expected = sum(entry["nbytes"] for entry in header["tensors"])
    if len(payload) != expected:
        raise ArchiveError(f"archive payload has {len(payload)} bytes, expected {expected}")
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, header["meta"]


def save(path, tensors: Mapping[str, torch.Tensor], meta: Any = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, torch.Tensor], Any]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    return loads(blob)
