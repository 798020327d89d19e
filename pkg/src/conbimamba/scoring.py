"""RTTM input/output and diarization error rate."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "Segment",
    "Annotation",
    "DerReport",
    "RttmError",
    "UndefinedDerError",
    "parse_rttm",
    "write_rttm",
    "der",
    "boundary_der",
    "aggregate",
    "change_points",
]

EXHAUSTIVE_LIMIT = 8


class RttmError(ValueError):
    pass


class UndefinedDerError(ValueError):
    """Reference contains no speech in the scored region."""


@dataclass(frozen=True, order=True)
class Segment:
    start: float
    end: float
    speaker: str


@dataclass
class Annotation:
    recording_id: str
    segments: list[Segment] = field(default_factory=list)

    def add(self, speaker: str, start: float, end: float) -> None:
        if not end > start:
            raise ValueError(f"segment end {end} must exceed start {start}")
        self.segments.append(Segment(float(start), float(end), str(speaker)))

    @property
    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def normalized(self) -> "Annotation":
        """Same-speaker segments that overlap or touch are merged; segments sorted."""
        merged: list[Segment] = []
        for spk in self.speakers:
            cur = None
            for s in sorted(x for x in self.segments if x.speaker == spk):
                if cur is not None and s.start <= cur.end:
                    cur = Segment(cur.start, max(cur.end, s.end), spk)
                else:
                    if cur is not None:
                        merged.append(cur)
                    cur = s
            merged.append(cur)
        return Annotation(self.recording_id, sorted(merged, key=lambda s: (s.start, s.speaker, s.end)))

    def total_speech(self) -> float:
        return float(sum(s.end - s.start for s in self.normalized().segments))


@dataclass
class DerReport:
    der: float
    miss: float
    false_alarm: float
    confusion: float
    total_ref_seconds: float
    speaker_mapping: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "der": self.der,
            "miss": self.miss,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "total_ref_seconds": self.total_ref_seconds,
            "speaker_mapping": dict(sorted(self.speaker_mapping.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table_row(self, name: str) -> str:
        return (
            f"{name:<24} {100 * self.der:7.2f} {100 * self.miss:7.2f} "
            f"{100 * self.false_alarm:7.2f} {100 * self.confusion:7.2f} {self.total_ref_seconds:10.2f}"
        )


TABLE_HEADER = f"{'recording':<24} {'DER%':>7} {'miss%':>7} {'FA%':>7} {'conf%':>7} {'ref_sec':>10}"


# --------------------------------------------------------------------------
# RTTM


def parse_rttm(text: str) -> list[Annotation]:
    """Parse ``SPEAKER`` records; other record types and blank lines are skipped."""
    by_rec: dict[str, Annotation] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#") or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmError(f"line {lineno}: expected at least 8 fields, got {len(fields)}")
        rec, spk = fields[1], fields[7]
        try:
            tbeg, tdur = float(fields[3]), float(fields[4])
        except ValueError:
            raise RttmError(f"line {lineno}: non-numeric onset/duration {fields[3]!r} {fields[4]!r}") from None
        if not (np.isfinite(tbeg) and np.isfinite(tdur)):
            raise RttmError(f"line {lineno}: non-finite onset/duration")
        if tdur < 0:
            raise RttmError(f"line {lineno}: negative duration {tdur}")
        ann = by_rec.setdefault(rec, Annotation(rec))
        if tdur == 0:
            continue
        start = round(tbeg, 6)
        ann.add(spk, start, round(tbeg + tdur, 6))
    return list(by_rec.values())


def write_rttm(annotations: list[Annotation]) -> str:
    rows = []
    for ann in annotations:
        for s in ann.segments:
            rows.append((ann.recording_id, s.start, s.speaker, s.end))
    rows.sort()
    return "".join(
        f"SPEAKER {rec} 1 {start:.3f} {end - start:.3f} <NA> <NA> {spk} <NA> <NA>\n"
        for rec, start, spk, end in rows
    )


# --------------------------------------------------------------------------
# scoring


def change_points(ann: Annotation) -> list[float]:
    """Times where any reference speaker starts or stops."""
    pts = set()
    for s in ann.normalized().segments:
        pts.update((s.start, s.end))
    return sorted(pts)


def _intervals(regions: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted(r for r in regions if r[1] > r[0]):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _in_any(t: np.ndarray, regions: list[tuple[float, float]]) -> np.ndarray:
    hit = np.zeros(t.shape, dtype=bool)
    for a, b in regions:
        hit |= (t >= a) & (t < b)
    return hit


def _activity(ann: Annotation, speakers: list[str], mids: np.ndarray) -> np.ndarray:
    act = np.zeros((mids.size, len(speakers)), dtype=bool)
    col = {s: i for i, s in enumerate(speakers)}
    for s in ann.segments:
        act[:, col[s.speaker]] |= (mids >= s.start) & (mids < s.end)
    return act


def _best_mapping(overlap: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one pairs (ref, hyp) maximising total overlap."""
    nr, nh = overlap.shape
    if nr == 0 or nh == 0:
        return []
    if max(nr, nh) <= EXHAUSTIVE_LIMIT:
        if nr <= nh:
            best, pairs = -1.0, []
            for perm in itertools.permutations(range(nh), nr):
                v = overlap[np.arange(nr), perm].sum()
                if v > best:
                    best, pairs = v, list(zip(range(nr), perm))
        else:
            best, pairs = -1.0, []
            for perm in itertools.permutations(range(nr), nh):
                v = overlap[perm, np.arange(nh)].sum()
                if v > best:
                    best, pairs = v, list(zip(perm, range(nh)))
        return [(r, h) for r, h in pairs]
    rows, cols = linear_sum_assignment(-overlap)
    return list(zip(rows.tolist(), cols.tolist()))


def _score(ref: Annotation, hyp: Annotation, collar: float, include=None, mapping=None) -> DerReport:
    if collar < 0:
        raise ValueError("collar must be >= 0")
    ref, hyp = ref.normalized(), hyp.normalized()
    excluded = []
    if collar > 0:
        excluded = _intervals([(b - collar / 2, b + collar / 2) for b in change_points(ref)])
    include = _intervals(include) if include is not None else None
    pts = {0.0}
    for ann in (ref, hyp):
        for s in ann.segments:
            pts.update((s.start, s.end))
    for a, b in excluded + (include or []):
        pts.update((a, b))
    edges = np.array(sorted(pts))
    if edges.size < 2:
        raise UndefinedDerError("reference has no speech")
    mids = 0.5 * (edges[:-1] + edges[1:])
    dur = np.diff(edges)
    scored = ~_in_any(mids, excluded) if excluded else np.ones(mids.size, dtype=bool)
    if include is not None:
        scored &= _in_any(mids, include)
    mids, dur = mids[scored], dur[scored]
    rs, hs = ref.speakers, hyp.speakers
    R, H = _activity(ref, rs, mids), _activity(hyp, hs, mids)
    total = float((dur[:, None] * R).sum())
    if total <= 0:
        raise UndefinedDerError(f"{ref.recording_id}: no reference speech in the scored region")
    if mapping is None:
        overlap = (dur[:, None, None] * R[:, :, None] * H[:, None, :]).sum(axis=0)
        pairs = _best_mapping(overlap)
        mapping = {rs[r]: hs[h] for r, h in pairs}
    correct = np.zeros(mids.size)
    hcol = {s: i for i, s in enumerate(hs)}
    for i, r in enumerate(rs):
        h = mapping.get(r)
        if h is not None and h in hcol:
            correct += R[:, i] & H[:, hcol[h]]
    nr, nh = R.sum(axis=1), H.sum(axis=1)
    miss = float((dur * np.maximum(nr - nh, 0)).sum())
    fa = float((dur * np.maximum(nh - nr, 0)).sum())
    conf = float((dur * (np.minimum(nr, nh) - correct)).sum())
    return DerReport(
        der=(miss + fa + conf) / total,
        miss=miss / total,
        false_alarm=fa / total,
        confusion=conf / total,
        total_ref_seconds=total,
        speaker_mapping=dict(mapping),
    )


def der(ref: Annotation, hyp: Annotation, collar: float = 0.0) -> DerReport:
    """Diarization error rate under the overlap-maximising one-to-one speaker mapping.

    A positive ``collar`` removes ``collar / 2`` seconds on each side of every
    reference boundary from scoring.
    """
    return _score(ref, hyp, collar)


def boundary_der(ref: Annotation, hyp: Annotation, radius: float = 0.25) -> DerReport:
    """DER scored only within ``radius`` seconds of reference change points.

    The speaker mapping is the one found on the full recording.
    """
    full = _score(ref, hyp, 0.0)
    regions = [(max(0.0, t - radius), t + radius) for t in change_points(ref)]
    return _score(ref, hyp, 0.0, include=regions, mapping=full.speaker_mapping)


def aggregate(reports: list[DerReport]) -> DerReport:
    """Combine per-recording reports weighted by reference speech time."""
    total = sum(r.total_ref_seconds for r in reports)
    if total <= 0:
        raise UndefinedDerError("no reference speech across recordings")

    def w(attr):
        return sum(getattr(r, attr) * r.total_ref_seconds for r in reports) / total

    miss, fa, conf = w("miss"), w("false_alarm"), w("confusion")
    return DerReport(miss + fa + conf, miss, fa, conf, total, {})
