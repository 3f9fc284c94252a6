"""Binary file formats for tensors and checkpoints.

GTEN v1 (single tensor):
    magic "GTEN", u8 version=1, u8 dtype (0=real32, 1=real64), u8 rank,
    rank x u32 little-endian extents, then raw little-endian values.

GCKPT v1 (named tensor container with a text header):
    magic "GCKPT", u8 version=1, u32 header length, header bytes
    (utf-8 "key=value" lines), u32 entry count, then per entry:
    u16 name length, utf-8 name, GTEN payload.
"""

from __future__ import annotations

import io
import struct

import numpy as np

__all__ = ["write_gten", "read_gten", "gten_bytes", "parse_gten",
           "save_checkpoint", "load_checkpoint"]

_GTEN_MAGIC = b"GTEN"
_GCKPT_MAGIC = b"GCKPT"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def gten_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"GTEN stores real32/real64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("GTEN rank limit is 255")
    out = io.BytesIO()
    out.write(_GTEN_MAGIC)
    out.write(struct.pack("<BBB", 1, _DTYPE_CODES[arr.dtype], arr.ndim))
    for extent in arr.shape:
        out.write(struct.pack("<I", extent))
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    out.write(np.ascontiguousarray(le).tobytes())
    return out.getvalue()


def parse_gten(buf: bytes, offset: int = 0):
    """Decode one GTEN payload; returns (array, next offset)."""
    if buf[offset:offset + 4] != _GTEN_MAGIC:
        raise ValueError("bad GTEN magic")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != 1:
        raise ValueError(f"unsupported GTEN version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown GTEN dtype code {code}")
    pos = offset + 7
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    pos += count * dtype.itemsize
    return arr.astype(arr.dtype.newbyteorder("=")), pos


def write_gten(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(gten_bytes(array))


def read_gten(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = parse_gten(fh.read())
    return arr


def save_checkpoint(path, entries: dict, header: dict | None = None) -> None:
    """Write named arrays plus a key=value text header."""
    lines = []
    for key, value in (header or {}).items():
        key = str(key)
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"header entry {key!r} cannot contain '=' or newlines")
        lines.append(f"{key}={value}")
    head = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_GCKPT_MAGIC)
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(entries)))
        for name, array in entries.items():
            blob = name.encode("utf-8")
            if len(blob) > 0xFFFF:
                raise ValueError(f"entry name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(gten_bytes(array))


def load_checkpoint(path):
    """Read back (entries, header) from a GCKPT file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != _GCKPT_MAGIC:
        raise ValueError("bad GCKPT magic")
    version = buf[5]
    if version != 1:
        raise ValueError(f"unsupported GCKPT version {version}")
    (head_len,) = struct.unpack_from("<I", buf, 6)
    pos = 10
    head = buf[pos:pos + head_len].decode("utf-8")
    pos += head_len
    header = {}
    for line in head.splitlines():
        if line:
            key, _, value = line.partition("=")
            header[key] = value
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        arr, pos = parse_gten(buf, pos)
        entries[name] = arr
    return entries, header
