"""Single-file checkpoint container.

Layout::

    ADPROG-CHECKPOINT 1
    {"config": ..., "tensors": [{"name", "shape", "offset", "count"}, ...]}
    <raw little-endian float32 payload>

The manifest is one line of canonical JSON (sorted keys); ``offset`` and
``count`` are in float32 elements from the start of the payload.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

MAGIC = b"ADPROG-CHECKPOINT 1\n"
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(tensors: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        flat = np.ascontiguousarray(np.asarray(arr), dtype=_PAYLOAD_DTYPE).reshape(-1)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = json.dumps({"config": config, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    return MAGIC + manifest.encode("utf-8") + b"\n" + b"".join(chunks)


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors, config))


def parse_checkpoint(blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an adprog checkpoint")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("missing manifest line")
    try:
        manifest = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    body = blob[end + 1:]
    if len(body) % _PAYLOAD_DTYPE.itemsize:
        raise CheckpointError("payload length is not a whole number of float32 values")
    payload = np.frombuffer(body, dtype=_PAYLOAD_DTYPE)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest["tensors"]:
        lo, n = entry["offset"], entry["count"]
        if lo + n > payload.size:
            raise CheckpointError(f"truncated payload for tensor {entry['name']}")
        tensors[entry["name"]] = payload[lo:lo + n].reshape(entry["shape"]).copy()
    return manifest["config"], tensors


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    return parse_checkpoint(Path(path).read_bytes())
