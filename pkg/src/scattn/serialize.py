"""Binary containers for tensors and checkpoints.

Tensor container layout (little-endian throughout):
  bytes 0..3   magic "SCAT"
  byte  4      format version, 0x01
  byte  5      dtype code: 0x01 = float32, 0x02 = float64
  byte  6      rank r (0 allowed: a scalar)
  next r*4     u32 extents
  rest         payload, row-major

Checkpoint archive layout:
  u32 entry count, then per entry [u16 name length, UTF-8 name, tensor
  container as above]. Entries are written in sorted-name order so the
  same parameter dict always produces identical bytes.

All malformed-input errors are :class:`FormatError` and name the byte
offset at which the problem was detected.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SCAT"
VERSION = 0x01
_DTYPES = {0x01: np.dtype("<f4"), 0x02: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0x01, np.dtype("float64"): 0x02}


def tensor_to_bytes(array, dtype="float64"):
    arr = np.asarray(array, dtype=dtype)
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(f"<{'f4' if code == 0x01 else 'f8'}").tobytes(order="C")


def tensor_from_bytes(buf):
    """Decode one tensor container; returns a float64 ndarray."""
    arr, end = _read_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"trailing {len(buf) - end} bytes after payload at offset {end}")
    return arr


def _read_tensor(buf, base):
    if len(buf) - base < 7:
        raise FormatError(f"container truncated in header at offset {base}")
    if buf[base:base + 4] != MAGIC:
        raise FormatError(f"bad magic at offset {base}: {buf[base:base + 4]!r}")
    version = buf[base + 4]
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} at offset {base + 4}")
    code = buf[base + 5]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code 0x{code:02x} at offset {base + 5}")
    rank = buf[base + 6]
    pos = base + 7
    if len(buf) - pos < 4 * rank:
        raise FormatError(f"container truncated in extents at offset {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"container truncated in payload at offset {pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    return arr.astype(np.float64), pos + nbytes


def write_tensor(path, array, dtype="float64"):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array, dtype))


def read_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def checkpoint_to_bytes(entries):
    """Serialize a name -> ndarray mapping (sorted by name)."""
    out = io.BytesIO()
    items = sorted(entries.items())
    out.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long ({len(raw)} bytes): {name[:40]}...")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(tensor_to_bytes(arr))
    return out.getvalue()


def checkpoint_from_bytes(buf):
    if len(buf) < 4:
        raise FormatError("archive truncated in entry count at offset 0")
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    entries = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise FormatError(f"archive truncated in name length at offset {pos}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < nlen:
            raise FormatError(f"archive truncated in name at offset {pos}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"entry name is not valid UTF-8 at offset {pos}") from e
        pos += nlen
        arr, pos = _read_tensor(buf, pos)
        if name in entries:
            raise FormatError(f"duplicate entry name {name!r} at offset {pos}")
        entries[name] = arr
    if pos != len(buf):
        raise FormatError(f"trailing {len(buf) - pos} bytes after last entry at offset {pos}")
    return entries


def write_checkpoint(path, entries):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(entries))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
