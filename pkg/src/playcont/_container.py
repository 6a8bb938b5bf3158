"""Checksummed binary container shared by the model file formats.

Layout (all integers little-endian)::

    magic            4 bytes
    version          u32
    header length    u32, then UTF-8 "key=value\\n" lines
    block count      u32
    per block:
        name length  u16, then UTF-8 name
        kind         u8   (0 = float64 array, 1 = UTF-8 text)
        array:       u8 ndim, ndim x u64 dims, little-endian float64 data
        text:        u64 length, bytes
    CRC-32           u32 over every preceding byte
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

FORMAT_VERSION = 1

_ARRAY, _TEXT = 0, 1


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class ShapeError(ModelFormatError):
    pass


def _encode_header(header: dict) -> bytes:
    lines = []
    for key, value in header.items():
        text = f"{key}={value}"
        if "\n" in text or "=" in key:
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(text + "\n")
    return "".join(lines).encode("utf-8")


def dump(magic: bytes, header: dict, blocks: list[tuple[str, object]]) -> bytes:
    out = bytearray(magic)
    out += struct.pack("<I", FORMAT_VERSION)
    hbytes = _encode_header(header)
    out += struct.pack("<I", len(hbytes)) + hbytes
    out += struct.pack("<I", len(blocks))
    for name, value in blocks:
        nbytes = name.encode("utf-8")
        out += struct.pack("<H", len(nbytes)) + nbytes
        if isinstance(value, str):
            data = value.encode("utf-8")
            out += struct.pack("<BQ", _TEXT, len(data)) + data
        else:
            arr = np.ascontiguousarray(value, dtype="<f8")
            out += struct.pack("<BB", _ARRAY, arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(data: bytes, magic: bytes) -> tuple[dict, dict]:
    """Parse a container; returns ``(header, blocks)`` with blocks in file order."""
    if len(data) < len(magic) + 8:
        raise ModelFormatError("file is truncated")
    if data[:len(magic)] != magic:
        raise ModelFormatError(f"bad magic {data[:len(magic)]!r}, expected {magic!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC-32 mismatch: file is corrupted or truncated")
    r = _Reader(body)
    r.take(len(magic))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<I")
    header = {}
    for line in r.take(hlen).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    (n_blocks,) = r.unpack("<I")
    blocks = {}
    for _ in range(n_blocks):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == _TEXT:
            (length,) = r.unpack("<Q")
            blocks[name] = r.take(length).decode("utf-8")
        elif kind == _ARRAY:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q")
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
            blocks[name] = arr.reshape(shape)
        else:
            raise ModelFormatError(f"unknown block kind {kind}")
    if r.pos != len(body):
        raise ModelFormatError("trailing bytes after the last block")
    return header, blocks
