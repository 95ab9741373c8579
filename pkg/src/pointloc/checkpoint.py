"""Binary tensor container and checkpoint/object-store serialization.

Container layout (all integers little-endian u32):

    magic b"PTAT" | version | entry count |
    per entry: name length | UTF-8 name | rank | dims... | payload (LE f32)

The same container carries model checkpoints (parameters, Adam moments, RNG
state, config echo) and the taught-object feature store (rank-1 vectors plus
provenance). Non-tensor metadata rides along as UTF-8 JSON bytes widened to
one float per byte, which keeps the format single-typed and the round-trip
byte-exact.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import DataError

MAGIC = b"PTAT"
VERSION = 1


def bytes_to_array(raw):
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def array_to_bytes(arr):
    return arr.astype(np.uint8).tobytes()


def json_to_array(obj):
    return bytes_to_array(json.dumps(obj, sort_keys=True).encode("utf-8"))


def array_to_json(arr):
    return json.loads(array_to_bytes(arr).decode("utf-8"))


def write_container(path, entries):
    """entries: mapping name -> ndarray (written as float32, insertion order)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def read_container(path):
    """Returns OrderedDict name -> float32 ndarray, preserving file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes after {count} entries")
    return out
