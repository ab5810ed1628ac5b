"""Self-describing binary checkpoints.

Layout: b"MDFL" | u32 version | u32 n | n bytes UTF-8 JSON metadata |
little-endian f64 arrays in manifest order | u64 CRC-64 of everything before.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MDFL"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


# CRC-64/XZ: reflected ECMA-182 polynomial, all-ones init and final xor
_POLY = 0xC96C5795D7870F42


def _crc_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def dumps(meta: dict, arrays: dict) -> bytes:
    names = list(arrays)
    manifest = [[n, list(np.shape(arrays[n]))] for n in names]
    text = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True, separators=(",", ":")).encode()
    body = [_HEADER.pack(MAGIC, VERSION, len(text)), text]
    body += [np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names]
    blob = b"".join(body)
    return blob + struct.pack("<Q", crc64(blob))


def loads(blob: bytes):
    """Inverse of ``dumps``; returns (meta, arrays)."""
    if len(blob) < _HEADER.size + 8:
        raise ChecksumMismatch("file too short to be a checkpoint")
    magic, version, n = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads version {VERSION}")
    (stored,) = struct.unpack("<Q", blob[-8:])
    if crc64(blob[:-8]) != stored:
        raise ChecksumMismatch("checkpoint checksum does not match contents")
    start = _HEADER.size
    head = json.loads(blob[start:start + n].decode())
    pos = start + n
    arrays = {}
    for name, shape in head["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(blob) - 8:
        raise ChecksumMismatch("array payload length does not match manifest")
    return head["meta"], arrays


def save(path, meta: dict, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(meta, arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
