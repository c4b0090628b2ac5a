"""A small self-describing binary container for named float64 arrays.

Layout::

    b"OPACGP\\0" | uint32 LE header length | UTF-8 JSON header | raw arrays

The JSON header holds ``{"format", "version", "meta", "arrays": [[name, shape], ...]}``
and the payload is each array as little-endian float64 in header order.
Writing the same arrays twice produces identical bytes, and the size
depends only on array shapes and the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InputError

MAGIC = b"OPACGP\0"


def pack(fmt: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append([name, list(arr.shape)])
        payload.append(arr.tobytes())
    header = json.dumps(
        {"format": fmt, "version": version, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload)


def unpack(blob: bytes, fmt: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise InputError("not an opacgp container (bad magic)")
    offset = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    header = json.loads(blob[offset : offset + hlen].decode())
    offset += hlen
    if header.get("format") != fmt:
        raise InputError(f"expected format {fmt!r}, found {header.get('format')!r}")
    if header.get("version") != version:
        raise InputError(f"unsupported {fmt} version {header.get('version')}")
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        arrays[name] = arr
        offset += 8 * count
    if offset != len(blob):
        raise InputError("trailing bytes after payload")
    return header["meta"], arrays
