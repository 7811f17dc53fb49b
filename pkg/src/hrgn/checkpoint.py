"""Model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"HRGNCKPT"
    4 bytes   format version (uint32)
    8 bytes   header length in bytes (uint64)
    header    UTF-8 JSON, keys sorted: version, head, y_mean, y_std, config,
              extra, tensors = [{name, shape, offset}] in name order
    payload   float64 little-endian tensor data, concatenated, C order

Offsets count bytes from the start of the payload. Floats in the header are
written with ``repr`` precision, so scalars round-trip exactly as well.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cell import Model, ModelConfig
from .numcore import jnp

MAGIC = b"HRGNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: Model, extra: dict | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(np.asarray(model.params[name], dtype="<f8"))
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": VERSION,
        "head": model.head,
        "y_mean": model.y_mean,
        "y_std": model.y_std,
        "config": asdict(model.config),
        "extra": extra or {},
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(chunks)


def loads(data: bytes) -> tuple[Model, dict]:
    """Inverse of :func:`dumps`; returns the model and the ``extra`` dict."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    if len(data) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    payload = memoryview(data)[20 + hlen :]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {t['name']!r} runs past the end of the file")
        arr = np.frombuffer(payload[t["offset"] : end], dtype="<f8").reshape(t["shape"])
        params[t["name"]] = jnp.asarray(arr.astype(np.float64))
    model = Model(ModelConfig(**header["config"]), params, header["head"], header["y_mean"], header["y_std"])
    return model, header["extra"]


def save(model: Model, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra))


def load(path) -> tuple[Model, dict]:
    return loads(Path(path).read_bytes())
