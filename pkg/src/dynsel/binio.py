"""Shared helpers for the JSON-header + little-endian record + CRC32 file layout."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np


class FormatError(Exception):
    pass


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ChecksumMismatchError(FormatError):
    pass


def dump_header(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_atomic(path: str | os.PathLike, header: dict, body: bytes) -> None:
    path = Path(path)
    blob = dump_header(header) + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def split(blob: bytes) -> tuple[dict, bytes]:
    """Return (header, record bytes) after verifying the trailing CRC."""
    nl = blob.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError("missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    rest = blob[nl + 1:]
    if len(rest) < 4:
        raise TruncatedPayloadError("file ends before the checksum")
    return header, rest


def verify(body: bytes, crc_bytes: bytes) -> None:
    if len(crc_bytes) != 4:
        raise TruncatedPayloadError("checksum is incomplete")
    (stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumMismatchError("CRC32 over record bytes does not match")


class Reader:
    """Sequential little-endian reader that raises ``TruncatedPayloadError`` at EOF."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos
