"""Named-array archive: the on-disk format for model parameters.

One file holds a JSON manifest (array names, shapes, element type) followed
by the raw array payloads, each stored little-endian. float32 is the working
dtype for parameters and accumulators; float64/int64 are accepted so tests
and counters round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"DIVPAINT-ARRAYS-1\n"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays to `path`. Insertion order of the dict is preserved."""
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = _dtype_name(arr.dtype)
        le = arr.astype(_DTYPES[kind], copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind})
        payloads.append(np.ascontiguousarray(le).tobytes())
    manifest = json.dumps({"arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest).to_bytes(8, "little"))
        fh.write(manifest)
        for blob in payloads:
            fh.write(blob)


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a named-array archive")
        size = int.from_bytes(fh.read(8), "little")
        manifest = json.loads(fh.read(size).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in manifest["arrays"]:
            dt = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            data = fh.read(count * dt.itemsize)
            arr = np.frombuffer(data, dtype=dt).reshape(entry["shape"])
            out[entry["name"]] = arr.copy()
        return out


def _dtype_name(dtype: np.dtype) -> str:
    if dtype in (np.float32, np.dtype("<f4")):
        return "float32"
    if dtype in (np.float64, np.dtype("<f8")):
        return "float64"
    if dtype in (np.int64, np.dtype("<i8")):
        return "int64"
    raise ValueError(f"unsupported archive dtype: {dtype}")
