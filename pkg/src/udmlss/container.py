"""Binary tensor container used for checkpoints and centroid dumps.

Layout, all integers little-endian::

    b"UDML" | version u32 | entry count u32
    per entry: name length u32 | name (UTF-8) | dtype tag u8 | rank u32
               | extents u64 * rank | payload (little-endian, row-major)
    CRC-32 u32 over every preceding byte

Metadata travels as a UTF-8 JSON entry named ``__meta__`` (tag 0).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"UDML"
VERSION = 1
META_KEY = "__meta__"

_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_DTYPES = {v: k for k, v in _TAGS.items()}
_UTF8_TAG = 0


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None, version: int = VERSION) -> bytes:
    items = list(arrays.items())
    parts = [MAGIC, struct.pack("<II", version, len(items) + (meta is not None))]
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts.append(_entry_header(META_KEY, _UTF8_TAG, (len(blob),)))
        parts.append(blob)
    for name, arr in items:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if arr.dtype == np.bool_:
            le = np.dtype("u1")
        if le not in _TAGS:
            raise TypeError(f"{name}: dtype {arr.dtype} cannot be stored")
        parts.append(_entry_header(name, _TAGS[le], arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _entry_header(name: str, tag: int, shape) -> bytes:
    raw = name.encode("utf-8")
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, len(shape))
            + struct.pack(f"<{len(shape)}Q", *shape))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a UDML container (bad magic)")
    if len(buf) < 16:
        raise CorruptionError(f"container truncated: {len(buf)} bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"container format version {version} is not supported by this reader (expects {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("container checksum mismatch (file truncated or corrupted)")
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    meta = None

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CorruptionError(f"entry runs past end of data: need {pos + n} bytes, have {len(body)}")
        out = body[pos:pos + n]
        pos += n
        return out

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        if tag == _UTF8_TAG:
            meta = json.loads(take(shape[0]).decode("utf-8"))
            continue
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).copy()
    if pos != len(body):
        raise CorruptionError(f"{len(body) - pos} trailing bytes after last entry")
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: a partially written file never replaces ``path``."""
    path = Path(path)
    data = encode(arrays, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode(Path(path).read_bytes())
