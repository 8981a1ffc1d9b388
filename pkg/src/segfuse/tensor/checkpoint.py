"""Checkpoint files.

Layout::

    b"SEGFUSE1"                     8-byte magic
    uint64 little-endian            length of the JSON header in bytes
    header                          UTF-8 JSON, keys sorted
    payload                         raw little-endian float64 arrays

The header records the model topology, the seed, and for every parameter its
name, shape, and byte offset relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Tuple, Union

import numpy as np

from segfuse.errors import DataIOError, MissingArtifactError

MAGIC = b"SEGFUSE1"
FORMAT_VERSION = 1


def encode_checkpoint(state: Mapping[str, np.ndarray], topology: dict, seed: int) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in state.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "topology": topology,
        "seed": int(seed),
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if blob[:8] != MAGIC:
        raise DataIOError("not a segfuse checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(blob)[16 + hlen :]
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise DataIOError(f"checkpoint truncated inside tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start : start + n], dtype="<f8").astype(np.float64)
        state[entry["name"]] = arr.reshape(entry["shape"])
    return header, state


def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray], topology: dict, seed: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(state, topology, seed))


def load_checkpoint(path: Union[str, Path]) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
