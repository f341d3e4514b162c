"""Checkpoint files: text manifest + flat little-endian float64 payload.

Layout::

    BEVKIT-CHECKPOINT 1
    count <n>
    <name> <d0,d1,...> <byte_offset>     (one line per array, offset into payload)
    <empty line>
    <raw '<f8' bytes, concatenated in manifest order>

Round-trips are bit-exact. Entries are written sorted by name so identical
array dicts always serialize to identical bytes.
"""

from __future__ import annotations

from typing import Dict

import numpy as np

from .errors import DataError

_MAGIC = "BEVKIT-CHECKPOINT 1"


def save_checkpoint(path, arrays: Dict[str, np.ndarray]):
    names = sorted(arrays)
    lines = [_MAGIC, f"count {len(names)}"]
    blobs = []
    offset = 0
    for name in names:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"checkpoint names cannot contain whitespace: {name!r}")
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dims} {offset}")
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = "\n".join(lines) + "\n\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise DataError(f"{path}: not a checkpoint file (no manifest terminator)")
    header = raw[:sep].decode("ascii").splitlines()
    payload = raw[sep + 2 :]
    if not header or header[0] != _MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    n = int(header[1].split()[1])
    out: Dict[str, np.ndarray] = {}
    for line in header[2 : 2 + n]:
        name, dims, offset = line.rsplit(" ", 2)
        shape = tuple(int(d) for d in dims.split(","))
        count = int(np.prod(shape))
        start = int(offset)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        out[name] = arr.reshape(shape).copy()
    if len(out) != n:
        raise DataError(f"{path}: manifest truncated ({len(out)} of {n} entries)")
    return out
