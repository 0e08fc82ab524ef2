"""Deterministic binary bundles: JSON metadata header + raw array payload.

np.savez embeds zip timestamps, which breaks byte-identical regeneration,
so artifacts use this tiny container instead: a magic string, a length
field, a canonical JSON header describing the arrays, then the raw
C-order array bytes in header order.  Equal inputs produce equal bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NRHOFORMBUNDLE1\n"


def save_bundle(path, meta: dict, arrays: dict) -> None:
    entries = []
    payload = b""
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_bundle(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a bundle file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for ent in header["arrays"]:
            n = int(np.prod(ent["shape"])) if ent["shape"] else 1
            dtype = np.dtype(ent["dtype"])
            buf = fh.read(n * dtype.itemsize)
            arrays[ent["name"]] = np.frombuffer(buf, dtype=dtype).reshape(ent["shape"]).copy()
    return header["meta"], arrays
