"""Deterministic binary container for named arrays plus JSON metadata.

Exists because archive formats embed modification times, which breaks
byte-identical artifact reproduction. Layout: magic, 8-byte little-endian
header length, canonical JSON header (sorted keys), then raw array
buffers in header order.
"""

import json
import struct

import numpy as np

MAGIC = b"OWDET1\n"
_ALLOWED_DTYPES = {"float64", "uint8", "int64"}


def dumps_meta(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


def save_arrays(path, arrays, meta=None):
    """Write ``arrays`` (ordered dict name -> ndarray) with ``meta`` attached."""
    entries = []
    buffers = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = dumps_meta({"meta": meta or {}, "arrays": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_arrays(path):
    """Read back (arrays dict in stored order, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: bad magic, not an array container")
    pos = len(MAGIC)
    (header_len,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + header_len].decode())
    pos += header_len
    arrays = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]
