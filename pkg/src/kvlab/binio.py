"""Binary container shared by trace files and optional weight dumps.

Layout (all integers little-endian):

    magic      4 bytes  b"KVTR"
    version    u16
    L, H, d_h, T_input, T_response, vocab   u32 each
    n_sections u32
    prov_len   u32
    provenance utf-8 bytes
    payload_size u64            byte length of the section region
    sections   n_sections entries, each:
                 name_len u16, name utf-8,
                 ndim u16, dims u32 * ndim,
                 data float32 row-major
    checksum   u64              first 8 bytes of SHA-256 over the section region

Distinct error classes let callers tell apart a wrong file type, a
structurally inconsistent one, and one cut short on disk.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"KVTR"
VERSION = 1


class TraceFormatError(Exception):
    """Base class for malformed container files."""


class BadMagicError(TraceFormatError):
    """File does not start with the KVTR magic."""


class TraceShapeError(TraceFormatError):
    """Section shapes disagree with the header or with each other."""


class TraceTruncationError(TraceFormatError):
    """File ends before the declared payload does."""


class ChecksumError(TraceFormatError):
    """Payload bytes do not hash to the stored checksum."""


@dataclass
class ContainerHeader:
    layers: int
    heads: int
    head_dim: int
    t_input: int
    t_response: int
    vocab: int
    provenance: str = ""


def _checksum(payload: bytes) -> int:
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def _encode_section(name: str, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype=np.float32)
    raw = data.astype("<f4", copy=False).tobytes()
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<H", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + raw


def write_container(path, header: ContainerHeader, sections) -> None:
    """Write named float32 tensors under the given header. `sections` is an
    ordered sequence of (name, array) pairs."""
    payload = b"".join(_encode_section(name, arr) for name, arr in sections)
    prov = header.provenance.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(
            struct.pack(
                "<6I",
                header.layers,
                header.heads,
                header.head_dim,
                header.t_input,
                header.t_response,
                header.vocab,
            )
        )
        f.write(struct.pack("<I", len(sections)))
        f.write(struct.pack("<I", len(prov)))
        f.write(prov)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(struct.pack("<Q", _checksum(payload)))


class _Cursor:
    """Sequential reader that reports truncation instead of short reads."""

    def __init__(self, buf: bytes, start: int = 0):
        self.buf = buf
        self.at = start

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.buf):
            raise TraceTruncationError(
                f"needed {n} bytes at offset {self.at}, file holds {len(self.buf)}"
            )
        out = self.buf[self.at : self.at + n]
        self.at += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_container(path):
    """Read a KVTR container; returns (header, dict name -> float32 array)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {buf[:4]!r}")
    cur = _Cursor(buf, 4)
    version = cur.u16()
    if version != VERSION:
        raise TraceFormatError(f"unsupported container version {version}")
    layers, heads, head_dim, t_input, t_response, vocab = (cur.u32() for _ in range(6))
    n_sections = cur.u32()
    prov = cur.take(cur.u32()).decode("utf-8")
    payload_size = cur.u64()
    payload_start = cur.at
    if payload_start + payload_size + 8 > len(buf):
        raise TraceTruncationError(
            f"declared payload of {payload_size} bytes exceeds file remainder"
        )
    sections = {}
    for _ in range(n_sections):
        name = cur.take(cur.u16()).decode("utf-8")
        ndim = cur.u16()
        dims = tuple(cur.u32() for _ in range(ndim))
        count = 1
        for d in dims:
            count *= d
        raw = cur.take(4 * count)
        sections[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if cur.at != payload_start + payload_size:
        raise TraceTruncationError(
            f"sections span {cur.at - payload_start} bytes, header declared {payload_size}"
        )
    payload = buf[payload_start : payload_start + payload_size]
    stored = _Cursor(buf, cur.at).u64()
    if stored != _checksum(payload):
        raise ChecksumError("payload checksum mismatch")
    header = ContainerHeader(layers, heads, head_dim, t_input, t_response, vocab, prov)
    return header, sections
