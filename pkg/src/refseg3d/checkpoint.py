"""Versioned binary checkpoint container.

Layout, all multi-byte integers little-endian:

    bytes 0-7    magic ``R3SEGCKP``
    bytes 8-11   format version, uint32 (currently 1)
    bytes 12-19  manifest length in bytes, uint64
    manifest     UTF-8 JSON: {"version", "epoch", "config",
                 "arrays": [{"name", "shape", "offset"}, ...]}
    payload      the arrays' float64 data, little-endian, back to back;
                 each offset is in bytes from the payload start

Arrays round-trip bit-exactly: the payload is the raw ``<f8`` buffer.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"R3SEGCKP"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], epoch: int,
                    config: dict) -> None:
    """Write the arrays plus a JSON manifest describing them."""
    records = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        # tobytes() copies in C order, so views and 0-d arrays are fine as-is
        data = np.asarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({"version": VERSION, "epoch": int(epoch),
                           "config": config, "arrays": records}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, dict]:
    """Read back (arrays, epoch, config); malformed files raise CheckpointError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, "
                              f"expected {VERSION}")
    (manifest_len,) = struct.unpack("<Q", blob[12:20])
    manifest_end = 20 + manifest_len
    if manifest_end > len(blob):
        raise CheckpointError(f"{path} is truncated inside the manifest")
    try:
        manifest = json.loads(blob[20:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt manifest") from exc
    payload = blob[manifest_end:]
    arrays: dict[str, np.ndarray] = {}
    for rec in manifest["arrays"]:
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(rec["offset"])
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path} is truncated inside array "
                                  f"{rec['name']!r}")
        arrays[rec["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, int(manifest["epoch"]), manifest["config"]
