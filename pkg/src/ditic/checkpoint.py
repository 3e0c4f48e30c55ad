"""DTCK parameter checkpoints and their key=value metadata sidecar.

Layout (all integers little-endian u32 unless noted)::

    b"DTCK" | version:u8 | { name_len | name (utf-8) | rank | extents[rank] | f32 payload }*
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: "OrderedDict[str, np.ndarray]") -> bytes:
    out = bytearray(MAGIC)
    out.append(VERSION)
    for name, arr in params.items():
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shape, unlike ascontiguousarray
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic, not a DTCK checkpoint")
    if len(data) < 5 or data[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[4] if len(data) > 4 else None}")
    pos = 5
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint record") from exc
    return params


def state_to_arrays(state: dict) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict(
        (k, v.detach().cpu().to(torch.float32).numpy()) for k, v in state.items()
    )


def save(path, state: dict, meta: dict | None = None) -> bytes:
    data = dumps(state_to_arrays(state))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    if meta is not None:
        write_meta(meta_path(path), meta)
    return data


def load(path) -> "OrderedDict[str, torch.Tensor]":
    arrays = loads(Path(path).read_bytes())
    return OrderedDict((k, torch.from_numpy(v)) for k, v in arrays.items())


def digest(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_meta(path, meta: dict) -> None:
    lines = [f"{k}={v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta
