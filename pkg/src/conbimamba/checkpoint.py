"""Parameter naming and the on-disk checkpoint container.

Binary layout (all integers little-endian)::

    bytes 0..7    magic  b"CBMCKPT\\0"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 length H of the JSON header
    next H bytes  UTF-8 JSON: {"version", "metadata", "params": [{"name", "shape", "offset"}]}
    remainder     float64 little-endian values, each parameter row-major,
                  starting at its "offset" (counted in values, not bytes)

The header is serialised with sorted keys, so identical parameters and
metadata produce identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .numcore import ShapeError, Tensor

MAGIC = b"CBMCKPT\0"
VERSION = 1

_SKIP_FIELDS = {"cfg", "mask"}


class CheckpointError(ValueError):
    pass


def named_parameters(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted.path, tensor)`` for every tensor inside a parameter tree."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name in _SKIP_FIELDS:
                continue
            value = getattr(obj, f.name)
            if value is None:
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_parameters(value, f"{prefix}.{i}" if prefix else str(i))


def state_dict(model: Any) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named_parameters(model)}


def load_state(model: Any, state: dict[str, np.ndarray]) -> None:
    """Copy ``state`` into ``model`` in place; names and shapes must match exactly."""
    params = dict(named_parameters(model))
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in params.items():
        value = np.asarray(state[name], dtype=np.float64)
        if value.shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {value.shape} vs model {t.shape}")
        t.data = value.copy()


def save(path: str | Path, state: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"version": VERSION, "metadata": metadata or {}, "params": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[20 + hlen :], dtype="<f8")
    state = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = values[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return state, header.get("metadata", {})


def average(states: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise arithmetic mean of parameter sets with identical names and shapes."""
    if not states:
        raise CheckpointError("need at least one checkpoint to average")
    names = set(states[0])
    for s in states[1:]:
        if set(s) != names:
            raise CheckpointError("checkpoints have different parameter names")
        for k in names:
            if s[k].shape != states[0][k].shape:
                raise ShapeError(f"{k}: shapes {states[0][k].shape} and {s[k].shape} differ")
    return {k: sum(s[k] for s in states) / len(states) for k in sorted(names)}
