"""Binary tensor archive used for checkpoints, flow dumps and external weights.

Layout (little-endian)::

    b"DVWS" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u8 dtype | u8 rank | rank x u64 extent | payload )

Arbitrary JSON metadata travels as a ``u8`` tensor named ``meta/json``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"DVWS"
VERSION = 1
META_KEY = "meta/json"

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3,
          np.dtype("<i4"): 4, np.dtype("<u4"): 5}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        items[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} too large")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    """Parse a whole archive; nothing is returned unless every byte checks out."""
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated archive: needed {n} bytes at offset {pos}, file has {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a DVWS archive (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"archive format version {version}, this build reads version {VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} tensors")
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
    return tensors, meta


def save(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    data = encode(tensors, meta)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".dvws")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        return decode(fh.read())
