"""Precomputed feature matrices and embedding tables on disk.

Binary feature file (``.feat``), little-endian::

    bytes 0..7    magic b"CBMFEAT\\0"
    bytes 8..11   uint32 version (1)
    bytes 12..19  uint64 number of frames T
    bytes 20..27  uint64 feature width D
    bytes 28..35  float64 frame rate (frames per second)
    bytes 36..    T * D float64 values, row-major (frame by frame)

Text feature file (any other suffix): a first line ``# frame_rate <value>``
followed by T lines of D whitespace-separated numbers.

Embedding table: one line per local speaker, ``<key> v1 v2 ...``, where the
key is ``<recording>:<chunk index>:<local speaker index>``; ``#`` starts a
comment line.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CBMFEAT\0"
VERSION = 1
_HEADER = struct.Struct("<8sIQQd")


class FeatureFileError(ValueError):
    pass


def write_features(path: str | Path, features: np.ndarray, frame_rate: float) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    if features.ndim != 2:
        raise FeatureFileError(f"features must be 2-D, got {features.shape}")
    path = Path(path)
    if path.suffix == ".feat":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, features.shape[0], features.shape[1], float(frame_rate)))
            fh.write(features.tobytes())
    else:
        lines = [f"# frame_rate {float(frame_rate)!r}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in features]
        path.write_text("\n".join(lines) + "\n")


def read_features(path: str | Path) -> tuple[np.ndarray, float]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".feat":
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        magic, version, T, D, fr = _HEADER.unpack(raw[: _HEADER.size])
        if magic != MAGIC:
            raise FeatureFileError(f"{path}: bad magic")
        if version != VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        body = raw[_HEADER.size :]
        if len(body) != 8 * T * D:
            raise FeatureFileError(f"{path}: expected {T}x{D} values, found {len(body) // 8}")
        return np.frombuffer(body, dtype="<f8").reshape(T, D).astype(np.float64), fr
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# frame_rate"):
        raise FeatureFileError(f"{path}: first line must be '# frame_rate <value>'")
    fr = float(lines[0].split()[2])
    rows = [np.array(l.split(), dtype=np.float64) for l in lines[1:] if l.strip()]
    if not rows:
        return np.zeros((0, 0)), fr
    if len({r.size for r in rows}) != 1:
        raise FeatureFileError(f"{path}: rows have different widths")
    return np.stack(rows), fr


def read_embedding_table(path: str | Path) -> dict[str, np.ndarray]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        try:
            table[fields[0]] = np.array(fields[1:], dtype=np.float64)
        except ValueError:
            raise FeatureFileError(f"{path}:{lineno}: non-numeric embedding value") from None
    return table


def write_embedding_table(path: str | Path, table: dict[str, np.ndarray]) -> None:
    lines = [f"{k} " + " ".join(repr(float(v)) for v in np.asarray(table[k]).ravel()) for k in sorted(table)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
