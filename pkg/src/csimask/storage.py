"""Little-endian binary container used by dataset files and checkpoints.

Layout: magic (4 bytes) | version (uint32) | header length (uint64) |
header JSON (utf-8) | raw array payload. The header carries a JSON
``meta`` dict plus an array index (name, dtype, shape, byte offset), so
reads are bit-exact round trips of writes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core.errors import BadMagicError, BadVersionError, TruncatedFileError

_HEAD = struct.Struct("<4sIQ")


def write_record(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]):
    """Write ``meta`` and named arrays under the given 4-byte magic."""
    index = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        index.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, version, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_record(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, arrays); raises typed errors on malformed files."""
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    got_magic, got_version, header_len = _HEAD.unpack_from(data, 0)
    if got_magic != magic:
        raise BadMagicError(f"{path}: magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise BadVersionError(f"{path}: version {got_version}, expected {version}")
    if len(data) < _HEAD.size + header_len:
        raise TruncatedFileError(f"{path}: truncated header")
    header = json.loads(data[_HEAD.size : _HEAD.size + header_len].decode("utf-8"))
    payload = data[_HEAD.size + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise TruncatedFileError(f"{path}: payload ends inside array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload[start : start + nbytes], dtype=dtype
        ).reshape(shape).copy()
    return header["meta"], arrays
