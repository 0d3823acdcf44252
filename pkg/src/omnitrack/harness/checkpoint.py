"""Binary checkpoint container.

Layout (little-endian)::

    b"UNISOTCK"  u32 version  u32 entry_count
    per entry: u32 name_len, utf-8 name, u8 dtype (0 = f64), u8 rank,
               u64 dims[rank], payload
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"UNISOTCK"
VERSION = 1
DTYPE_F64 = 0


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def to_bytes(tensors: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, t in tensors.items():
        # asarray, not ascontiguousarray, which would promote scalars to rank 1
        arr = np.asarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BB", DTYPE_F64, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def save_checkpoint(tensors: dict, path) -> None:
    Path(path).write_bytes(to_bytes(tensors))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    out = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F64:
            raise CheckpointError(f"unsupported dtype code {dtype} for {name!r}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        count_vals = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * count_vals), dtype="<f8").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float64))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last entry")
    return out


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    return from_bytes(Path(path).read_bytes())
