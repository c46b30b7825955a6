"""Standalone KVTR container writer.

Deliberately self-contained: this package talks to the replay engine
only through the file format, so the writer is reimplemented here from
the format description rather than imported.

    magic "KVTR" | version u16 | L H d_h T_input T_response vocab (u32)
    n_sections u32 | provenance (u32 len + utf-8) | payload_size u64
    per section: name (u16 len + utf-8) | ndim u16 | dims u32 | f32 LE data
    trailer: u64 = first 8 bytes of SHA-256 over the section payload
"""

import hashlib
import struct

import numpy as np

MAGIC = b"KVTR"
VERSION = 1


def _section(name: str, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<H", data.ndim)
    head += b"".join(struct.pack("<I", d) for d in data.shape)
    return head + data.tobytes()


def write_kvtr(path, *, layers, heads, head_dim, t_input, t_response, vocab,
               provenance, sections) -> None:
    """sections: iterable of (name, float-convertible ndarray)."""
    sections = list(sections)
    payload = b"".join(_section(n, a) for n, a in sections)
    prov = provenance.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<6I", layers, heads, head_dim, t_input, t_response, vocab))
        f.write(struct.pack("<I", len(sections)))
        f.write(struct.pack("<I", len(prov)))
        f.write(prov)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        digest = hashlib.sha256(payload).digest()[:8]
        f.write(struct.pack("<Q", int.from_bytes(digest, "little")))
