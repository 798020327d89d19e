"""Seeded feature-level conversation simulator.

Each speaker owns a random unit signature vector; a frame's feature is the
sum of the signatures of the speakers active in it plus Gaussian noise.
Turns alternate between speakers with uniform lengths; at a turn change the
next speaker may start early (an overlap) or after a silence gap. At most two
speakers are ever active at once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numcore import ConfigError
from .scoring import Annotation

MAX_SPEAKERS = 4
MAX_OVERLAP_RATIO = 0.5


@dataclass
class SynthConfig:
    num_speakers: int = 4
    feature_dim: int = 64
    frame_rate: float = 10.0
    duration_seconds: float = 300.0
    overlap_ratio: float = 0.1
    turn_min_seconds: float = 1.0
    turn_max_seconds: float = 6.0
    gap_probability: float = 0.3
    gap_min_seconds: float = 0.2
    gap_max_seconds: float = 1.5
    noise_std: float = 0.1
    seed: int = 0
    recording_id: str = "rec"

    def validate(self) -> None:
        if not 1 <= self.num_speakers <= MAX_SPEAKERS:
            raise ConfigError(f"num_speakers must be in 1..{MAX_SPEAKERS}, got {self.num_speakers}")
        if not 0.0 <= self.overlap_ratio <= MAX_OVERLAP_RATIO:
            raise ConfigError(f"overlap_ratio must be in [0, {MAX_OVERLAP_RATIO}], got {self.overlap_ratio}")
        if self.overlap_ratio > 0 and self.num_speakers < 2:
            raise ConfigError("overlap needs at least two speakers")
        if self.feature_dim < 1 or self.frame_rate <= 0 or self.duration_seconds <= 0:
            raise ConfigError("feature_dim, frame_rate and duration must be positive")
        if not 0 < self.turn_min_seconds <= self.turn_max_seconds:
            raise ConfigError("need 0 < turn_min_seconds <= turn_max_seconds")
        if not 0 <= self.gap_min_seconds <= self.gap_max_seconds:
            raise ConfigError("need 0 <= gap_min_seconds <= gap_max_seconds")
        if not 0.0 <= self.gap_probability <= 1.0:
            raise ConfigError("gap_probability must be in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if round(self.turn_min_seconds * self.frame_rate) < 2:
            raise ConfigError("turns must span at least two frames")

    def to_dict(self) -> dict:
        return asdict(self)


def _turns(cfg: SynthConfig, rng: np.random.Generator, n_frames: int) -> list[tuple[int, int, int]]:
    """Sample ``(speaker, start_frame, end_frame)`` turns covering the recording."""
    fr = cfg.frame_rate
    lo, hi = round(cfg.turn_min_seconds * fr), round(cfg.turn_max_seconds * fr)
    glo, ghi = round(cfg.gap_min_seconds * fr), round(cfg.gap_max_seconds * fr)
    count = np.zeros(n_frames, dtype=int)
    turns = []
    speaker = int(rng.integers(cfg.num_speakers))
    start, length = 0, int(rng.integers(lo, hi + 1))
    prev_end = 0  # end of the turn before the current one
    while start < n_frames:
        end = min(start + length, n_frames)
        s = start
        while s < end and count[s] >= 2:
            s += 1
        if s < end:
            count[s:end] += 1
            turns.append((speaker, s, end))
        nxt = speaker
        if cfg.num_speakers > 1:
            nxt = int(rng.choice([k for k in range(cfg.num_speakers) if k != speaker]))
        nlen = int(rng.integers(lo, hi + 1))
        speech = np.count_nonzero(count[:end])
        achieved = np.count_nonzero(count[:end] >= 2) / speech if speech else 0.0
        # Bernoulli overlap insertion; the probability leans against the
        # running error so long recordings settle on the target ratio
        p_ov = float(np.clip(0.5 + 25.0 * (cfg.overlap_ratio - achieved), 0.0, 1.0))
        if cfg.overlap_ratio > 0 and rng.random() < p_ov:
            # the next turn may not start before the previous one ended, so
            # three speakers never meet
            cap = min(end - max(s, prev_end), nlen - 1)
            ov = int(rng.integers(max(1, round(cfg.overlap_ratio * cap)), cap + 1)) if cap >= 1 else 0
            nstart = end - ov
        elif rng.random() < cfg.gap_probability:
            nstart = end + int(rng.integers(glo, ghi + 1))
        else:
            nstart = end
        prev_end = end
        speaker, start, length = nxt, nstart, nlen
    return turns


def generate(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, Annotation]:
    """Features ``(T, feature_dim)``, labels ``(T, num_speakers)`` and the reference annotation."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_frames = int(round(cfg.duration_seconds * cfg.frame_rate))
    sig = rng.standard_normal((cfg.num_speakers, cfg.feature_dim))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    labels = np.zeros((n_frames, cfg.num_speakers))
    ann = Annotation(cfg.recording_id)
    for spk, s, e in _turns(cfg, rng, n_frames):
        labels[s:e, spk] = 1.0
    # annotation is read back from the frame grid so both agree exactly
    for spk in range(cfg.num_speakers):
        col = np.concatenate([[0], labels[:, spk].astype(int), [0]])
        d = np.diff(col)
        for s, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            ann.add(f"spk{spk}", round(s / cfg.frame_rate, 6), round(e / cfg.frame_rate, 6))
    ann = ann.normalized()
    noise = rng.standard_normal((n_frames, cfg.feature_dim)) * cfg.noise_std
    features = labels @ sig + noise
    return features, labels, ann


def overlap_fraction(labels: np.ndarray) -> float:
    """Overlapped time over total speech time (frames with at least one speaker)."""
    n = labels.sum(axis=1)
    speech = (n >= 1).sum()
    return float((n >= 2).sum() / speech) if speech else 0.0


def annotation_to_labels(ann: Annotation, n_frames: int, frame_rate: float,
                         speakers: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Frame-level activity matrix; frame ``t`` covers ``[t, t+1) / frame_rate``."""
    speakers = speakers if speakers is not None else ann.speakers
    col = {s: i for i, s in enumerate(speakers)}
    y = np.zeros((n_frames, len(speakers)))
    for seg in ann.segments:
        if seg.speaker not in col:
            continue
        s = max(0, int(round(seg.start * frame_rate)))
        e = min(n_frames, int(round(seg.end * frame_rate)))
        y[s:e, col[seg.speaker]] = 1.0
    return y, speakers
