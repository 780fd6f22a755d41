import struct

import numpy as np
import pytest


def edf_bytes(signals, record_s=1.0, n_records=None, dmin=-32768, dmax=32767, pmin=-3200.0,
              pmax=3200.0, dim="uV"):
    """Hand-assembled EDF file; ``signals`` maps label -> (digital int array, samples/record)."""

    def f(text, width):
        return str(text).ljust(width)[:width].encode("ascii")

    ns = len(signals)
    recs = n_records
    if recs is None:
        recs = len(next(iter(signals.values()))[0]) // next(iter(signals.values()))[1]
    head = (f("0", 8) + f("X", 80) + f("X", 80) + f("01.01.00", 8) + f("00.00.00", 8)
            + f(256 * (ns + 1), 8) + f("", 44) + f(recs, 8) + f(record_s, 8) + f(ns, 4))
    cols = [[] for _ in range(10)]
    for label, (_, spr) in signals.items():
        for i, (v, w) in enumerate([(label, 16), ("", 80), (dim, 8), (pmin, 8), (pmax, 8),
                                    (dmin, 8), (dmax, 8), ("", 80), (spr, 8), ("", 32)]):
            cols[i].append(f(v, w))
    head += b"".join(b"".join(c) for c in cols)
    body = b""
    for r in range(len(next(iter(signals.values()))[0]) // next(iter(signals.values()))[1]):
        for dig, spr in signals.values():
            chunk = np.asarray(dig[r * spr:(r + 1) * spr], dtype="<i2")
            body += struct.pack(f"<{spr}h", *chunk.tolist())
    return head + body


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_edf():
    return edf_bytes
