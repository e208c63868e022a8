"""Versioned binary container for pretrained policy parameters.

Layout (all integers little-endian)::

    magic       8 bytes  b"TTVLACKP"
    version     u32
    n_widths    u32, then n_widths x u32 layer widths
    history     u32
    d_obs       u32
    n_instr     u32
    n_entries   u32
    entry*      u16 name length, utf-8 name, u8 trainable, u8 ndim,
                ndim x u32 dims, float64 values (row-major)
    crc32       u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .numkit import ParamStore, mlp_sizes

MAGIC = b"TTVLACKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CheckpointMeta:
    history: int
    d_obs: int
    n_instructions: int
    widths: tuple = ()


def dumps(params: ParamStore, meta: CheckpointMeta) -> bytes:
    widths = mlp_sizes(params)
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(widths)) + struct.pack(f"<{len(widths)}I", *widths)
    out += struct.pack("<III", meta.history, meta.d_obs, meta.n_instructions)
    names = params.names()
    out += struct.pack("<I", len(names))
    for name in names:
        value = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", int(params.is_trainable(name)), value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += value.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def loads(blob: bytes) -> tuple[ParamStore, CheckpointMeta]:
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch; file is corrupt")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_widths,) = take("<I")
    widths = take(f"<{n_widths}I")
    history, d_obs, n_instr = take("<III")
    (n_entries,) = take("<I")
    params = ParamStore()
    for _ in range(n_entries):
        (name_len,) = take("<H")
        name = body[pos : pos + name_len].decode()
        pos += name_len
        trainable, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params.add(name, value.astype(np.float64), trainable=bool(trainable))
    if pos != len(body):
        raise CheckpointError("trailing bytes after last entry")
    if tuple(mlp_sizes(params)) != tuple(widths):
        raise CheckpointError(f"shape header {widths} disagrees with stored layers")
    return params, CheckpointMeta(history, d_obs, n_instr, tuple(widths))


def save(path, params: ParamStore, meta: CheckpointMeta) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, meta))


def load(path) -> tuple[ParamStore, CheckpointMeta]:
    with open(path, "rb") as fh:
        return loads(fh.read())
