"""On-disk corpus layout and training-segment preparation.

A corpus directory holds::

    manifest.json              {"frame_rate": ..., "feature_dim": ..., "splits": {split: [recording ids]}}
    <split>/<recording>.feat   features (see :mod:`conbimamba.features`)
    <split>/reference.rttm     reference annotation of every recording in the split
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .features import read_features, write_features
from .pipeline import DevRecording
from .scoring import Annotation, parse_rttm, write_rttm
from .synthdata import SynthConfig, annotation_to_labels, generate

SPLITS = ("train", "dev", "test")


class DatasetError(ValueError):
    pass


def recording_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split), index]).generate_state(1)[0])


def synthesize_split(synth: SynthConfig, split: str, total_seconds: float, seed: int) -> list[DevRecording]:
    """Recordings of ``synth.duration_seconds`` each (the last one shorter) covering ``total_seconds``."""
    recs = []
    remaining, i = total_seconds, 0
    while remaining > 1e-9:
        dur = min(synth.duration_seconds, remaining)
        cfg = replace(synth, duration_seconds=dur, seed=recording_seed(seed, split, i),
                      recording_id=f"{split}{i:03d}")
        feats, _, ann = generate(cfg)
        recs.append(DevRecording(cfg.recording_id, feats, cfg.frame_rate, ann))
        remaining -= dur
        i += 1
    return recs


def write_corpus(out: str | Path, splits: dict[str, list[DevRecording]]) -> None:
    out = Path(out)
    manifest = {"splits": {}}
    for split, recs in splits.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for r in recs:
            write_features(d / f"{r.recording_id}.feat", r.features, r.frame_rate)
            manifest["frame_rate"] = r.frame_rate
            manifest["feature_dim"] = int(r.features.shape[1])
        (d / "reference.rttm").write_text(write_rttm([r.reference for r in recs]))
        manifest["splits"][split] = [r.recording_id for r in recs]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_split(root: str | Path, split: str) -> list[DevRecording]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if split not in manifest.get("splits", {}):
        raise DatasetError(f"{root}: split '{split}' not in manifest")
    ids = manifest["splits"][split]
    rpath = root / split / "reference.rttm"
    refs = {a.recording_id: a for a in parse_rttm(rpath.read_text())} if rpath.exists() else {}
    recs = []
    for rid in ids:
        fpath = root / split / f"{rid}.feat"
        if not fpath.exists():
            raise DatasetError(f"missing feature file {fpath}")
        feats, fr = read_features(fpath)
        recs.append(DevRecording(rid, feats, fr, refs.get(rid, Annotation(rid))))
    return recs


@dataclass
class Segment:
    features: np.ndarray  # (T, D)
    labels: np.ndarray  # (T, K)


def local_labels(ann: Annotation, start_frame: int, n_frames: int, frame_rate: float,
                 n_speakers: int) -> np.ndarray:
    """Labels of one window; columns are its speakers by first activity, the ``n_speakers`` busiest kept."""
    full, speakers = annotation_to_labels(ann, start_frame + n_frames, frame_rate)
    y = full[start_frame:]
    active = [k for k in range(y.shape[1]) if y[:, k].any()]
    if len(active) > n_speakers:
        busiest = sorted(active, key=lambda k: (-y[:, k].sum(), k))[:n_speakers]
        active = [k for k in active if k in busiest]
    active.sort(key=lambda k: int(np.argmax(y[:, k] > 0)))
    out = np.zeros((n_frames, n_speakers))
    out[:, : len(active)] = y[:, active]
    return out


def make_segments(recs: list[DevRecording], chunk_seconds: float, n_speakers: int) -> list[Segment]:
    segs = []
    for r in recs:
        n = int(round(chunk_seconds * r.frame_rate))
        for s in range(0, len(r.features), n):
            e = min(s + n, len(r.features))
            if e - s < 2:
                continue
            segs.append(Segment(r.features[s:e], local_labels(r.reference, s, e - s, r.frame_rate, n_speakers)))
    return segs


def collate(segs: list[Segment]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Zero-padded ``(B, T, D)`` features, ``(B, T, K)`` labels and a frame mask (``None`` if no padding)."""
    T = max(len(s.features) for s in segs)
    B, D, K = len(segs), segs[0].features.shape[1], segs[0].labels.shape[1]
    x, y, m = np.zeros((B, T, D)), np.zeros((B, T, K)), np.zeros((B, T))
    for i, s in enumerate(segs):
        t = len(s.features)
        x[i, :t], y[i, :t], m[i, :t] = s.features, s.labels, 1.0
    return x, y, (None if m.all() else m)
