"""Small self-describing binary container.

Layout: 8-byte magic, little-endian uint32 header length, a JSON header
(sorted keys) describing the metadata and every array, then the raw
little-endian array bytes in header order.  Output is byte-for-byte
deterministic for equal inputs, unlike ``np.savez`` which stamps zip
entries with the current time.
"""

import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"PSGRBIN1"


def dumps(kind, version, meta, arrays):
    """Serialise ``arrays`` (a dict of ndarrays) with JSON-able ``meta``."""
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        a = np.asarray(arrays[name])
        a = np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<"), copy=False))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "version": version, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def loads(data, kind=None):
    """Inverse of :func:`dumps`; returns ``(version, meta, arrays)``."""
    data = bytes(data)
    if data[:8] != MAGIC:
        raise ParseError("not a psgrbd binary container", 0)
    if len(data) < 12:
        raise ParseError("truncated container header", len(data))
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("corrupt container header", 12) from None
    if kind is not None and header.get("kind") != kind:
        raise ParseError(f"expected a {kind!r} container, found {header.get('kind')!r}", 12)
    base = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ParseError(f"array {e['name']!r} runs past end of file", start)
        a = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=start)
        arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return header["version"], header["meta"], arrays
