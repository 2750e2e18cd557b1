"""Versioned binary checkpoint of named float64 tensors.

Layout (all integers little-endian)::

    b"PANI"  u32 version
    repeated until EOF:
        u32 name_length, name (utf-8), u32 rank, rank x u64 extents, f64 data
"""

from __future__ import annotations

import struct

import numpy as np

from pani.errors import FormatError, TruncatedFileError

MAGIC = b"PANI"
VERSION = 1


def encode_checkpoint(params: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in params.items():
        value = np.require(np.asarray(value, dtype="<f8"), requirements="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", value.ndim) + struct.pack("<" + "Q" * value.ndim, *value.shape))
        chunks.append(value.tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw: bytes) -> dict:
    if raw[:4] != MAGIC:
        raise FormatError(f"not a checkpoint: magic {raw[:4]!r} at byte offset 0")
    if len(raw) < 8:
        raise TruncatedFileError("checkpoint header truncated")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFileError(f"checkpoint truncated at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack("<" + "Q" * rank, take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
