"""Global diarization of long recordings.

Recordings are cut into fixed-length chunks, each chunk is diarized locally
by the model, every sufficiently active local speaker is embedded, the
embeddings are clustered with centroid-linkage AHC, and local activities are
relabelled with the global cluster ids and merged into one timeline.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import numcore as nc
from .encoder import Mode, ModelParams, model_forward
from .numcore import ConfigError, ContractError, ShapeError
from .scoring import Annotation, DerReport, aggregate, der

logger = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    pass


@dataclass
class Chunk:
    start: float
    end: float
    features: np.ndarray
    frame_rate: float
    start_frame: int = 0

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class LocalSpeaker:
    chunk_id: int
    local_index: int
    active_frames: np.ndarray
    embedding: np.ndarray


@dataclass
class ClusterConfig:
    threshold: float = 0.7
    min_cluster_size: int = 1
    metric: str = "cosine"

    def validate(self) -> None:
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.metric == "cosine" and not 0.0 < self.threshold:
            raise ConfigError(f"cosine threshold must be positive, got {self.threshold}")
        if self.min_cluster_size < 1:
            raise ConfigError("min_cluster_size must be >= 1")


@dataclass
class PipelineConfig:
    chunk_seconds: float = 20.0
    stride_seconds: float = 20.0
    binarize_threshold: float = 0.5
    min_active: int = 10
    clean_frames: bool = True
    batch_size: int = 8
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def to_dict(self) -> dict:
        return asdict(self)


class Embedder(Protocol):
    def __call__(self, features: np.ndarray, mask: np.ndarray, key: str | None = None) -> np.ndarray: ...


class StatsPoolEmbedder:
    """Mean and standard deviation of the selected frames, concatenated."""

    def __call__(self, features, mask, key=None):
        sel = features[np.asarray(mask, dtype=bool)]
        if sel.shape[0] == 0:
            raise EmbeddingError("no frames selected")
        return np.concatenate([sel.mean(axis=0), sel.std(axis=0)])


class TableEmbedder:
    """Looks embeddings up by key in a precomputed table (see :func:`read_embedding_table`)."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = table

    def __call__(self, features, mask, key=None):
        if key not in self.table:
            raise EmbeddingError(f"no precomputed embedding for {key!r}")
        return np.asarray(self.table[key], dtype=np.float64)


def speaker_key(recording_id: str, chunk_id: int, local_index: int) -> str:
    return f"{recording_id}:{chunk_id}:{local_index}"


# --------------------------------------------------------------------------
# chunking and local inference


def chunk_sequence(features: np.ndarray, frame_rate: float, chunk_seconds: float = 20.0,
                   stride_seconds: float | None = None) -> list[Chunk]:
    """Cut ``(T, D)`` features into chunks; the last chunk may be shorter."""
    features = np.asarray(features, dtype=np.float64)
    stride_seconds = chunk_seconds if stride_seconds is None else stride_seconds
    if chunk_seconds <= 0 or stride_seconds <= 0 or frame_rate <= 0:
        raise ConfigError("chunk length, stride and frame rate must be positive")
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError(f"need non-empty (T, D) features, got {features.shape}")
    total = features.shape[0]
    size = max(1, int(round(chunk_seconds * frame_rate)))
    step = max(1, int(round(stride_seconds * frame_rate)))
    chunks, s = [], 0
    while True:
        e = min(s + size, total)
        chunks.append(Chunk(s / frame_rate, e / frame_rate, features[s:e].copy(), frame_rate, s))
        s += step
        if e >= total or s >= total:
            return chunks


def chunk_probabilities(chunks: Sequence[Chunk], model: ModelParams, batch_size: int = 8) -> list[np.ndarray]:
    """Activity probabilities ``(T, K)`` per chunk, inference mode, batched by length."""
    out: list[np.ndarray | None] = [None] * len(chunks)
    for c in chunks:
        if c.features.shape[1] != model.cfg.feature_dim:
            raise ShapeError(f"chunk feature width {c.features.shape[1]} != model feature_dim {model.cfg.feature_dim}")
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(chunks):
        by_len.setdefault(c.n_frames, []).append(i)
    with nc.no_grad():
        for idx in by_len.values():
            for j in range(0, len(idx), batch_size):
                part = idx[j : j + batch_size]
                x = nc.Tensor(np.stack([chunks[i].features for i in part]))
                probs, _ = model_forward(x, model, Mode(training=False))
                for i, p in zip(part, probs.data):
                    out[i] = p
    return out


def local_diarize(chunk: Chunk, model: ModelParams, binarize_threshold: float = 0.5) -> np.ndarray:
    """Binary ``(T, K)`` activity of one chunk."""
    if not 0.0 < binarize_threshold < 1.0:
        raise ConfigError("binarize_threshold must be in (0, 1)")
    (p,) = chunk_probabilities([chunk], model)
    return (p >= binarize_threshold).astype(np.int8)


def extract_embeddings(chunk: Chunk, activity: np.ndarray, embedder: Embedder | Callable, chunk_id: int = 0,
                       min_active: int = 10, clean_frames: bool = True,
                       recording_id: str = "rec") -> list[LocalSpeaker]:
    """One unit-norm embedding per local speaker with at least ``min_active`` active frames.

    With ``clean_frames`` the embedder sees only frames where that speaker is
    the sole active one, provided there are at least ``min_active`` of them.
    """
    activity = np.asarray(activity).astype(bool)
    if activity.shape[0] != chunk.n_frames:
        raise ShapeError(f"activity has {activity.shape[0]} frames, chunk has {chunk.n_frames}")
    alone = activity.sum(axis=1) == 1
    speakers = []
    for k in range(activity.shape[1]):
        act = activity[:, k]
        if act.sum() < min_active:
            continue
        mask = act
        if clean_frames and (act & alone).sum() >= min_active:
            mask = act & alone
        key = speaker_key(recording_id, chunk_id, k)
        try:
            emb = np.asarray(embedder(chunk.features, mask, key), dtype=np.float64)
        except Exception as exc:
            raise EmbeddingError(f"embedding failed for chunk {chunk_id} [{chunk.start:.2f}, {chunk.end:.2f}) "
                                 f"speaker {k}: {exc}") from exc
        norm = np.linalg.norm(emb)
        if not np.isfinite(norm) or norm == 0:
            raise EmbeddingError(f"chunk {chunk_id} speaker {k}: embedding has zero or non-finite norm")
        speakers.append(LocalSpeaker(chunk_id, k, act.copy(), emb / norm))
    return speakers


# --------------------------------------------------------------------------
# clustering


def _distance_matrix(cent: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        return 1.0 - cent @ cent.T
    sq = (cent * cent).sum(axis=1)
    return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * cent @ cent.T, 0.0))


def _centroid(x: np.ndarray, metric: str) -> np.ndarray:
    c = x.mean(axis=0)
    if metric == "cosine":
        n = np.linalg.norm(c)
        return c / n if n > 0 else c
    return c


def ahc_cluster(embeddings: Sequence[np.ndarray], cfg: ClusterConfig) -> list[int]:
    """Centroid-linkage agglomerative clustering with a distance threshold.

    The closest pair of clusters (lowest index pair on ties) is merged while
    its centroid distance is at most ``cfg.threshold``. Clusters smaller than
    ``cfg.min_cluster_size`` are then dissolved into the nearest surviving
    cluster; if none survives, the clusters are kept as they are. Ids are
    numbered from 0 in order of first appearance.
    """
    cfg.validate()
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("ahc_cluster needs at least one embedding")
    members = [[i] for i in range(X.shape[0])]
    cent = np.array([_centroid(X[m], cfg.metric) for m in members])
    while len(members) > 1:
        d = _distance_matrix(cent, cfg.metric)
        d[np.tril_indices(len(members))] = np.inf
        flat = int(np.argmin(d))
        i, j = divmod(flat, len(members))
        if not d[i, j] <= cfg.threshold:
            break
        members[i] = sorted(members[i] + members[j])
        del members[j]
        cent = np.delete(cent, j, axis=0)
        cent[i] = _centroid(X[members[i]], cfg.metric)
    keep = [k for k, m in enumerate(members) if len(m) >= cfg.min_cluster_size]
    if keep and len(keep) < len(members):
        kept = [members[k] for k in keep]
        kcent = cent[keep]
        for k, m in enumerate(members):
            if k in keep:
                continue
            for i in m:
                dist = _distance_matrix(np.vstack([X[i][None], kcent]), cfg.metric)[0, 1:]
                kept[int(np.argmin(dist))].append(i)
        members = kept
    label = np.empty(X.shape[0], dtype=int)
    for k, m in enumerate(members):
        label[m] = k
    order: dict[int, int] = {}
    return [order.setdefault(int(l), len(order)) for l in label]


# --------------------------------------------------------------------------
# stitching


def stitch(chunks: Sequence[Chunk], speakers: Sequence[LocalSpeaker], assignment: Sequence[int],
           recording_id: str = "rec", n_frames: int | None = None) -> Annotation:
    """Relabel local activities with global ids and merge them into one annotation.

    Where chunks overlap, a global speaker is active if any chunk says so.
    """
    if len(assignment) != len(speakers):
        raise ContractError(f"{len(speakers)} local speakers but {len(assignment)} assignments")
    ann = Annotation(recording_id)
    if not chunks:
        return ann
    fr = chunks[0].frame_rate
    if n_frames is None:
        n_frames = max(c.start_frame + c.n_frames for c in chunks)
    n_global = max(assignment) + 1 if len(assignment) else 0
    act = np.zeros((n_frames, n_global), dtype=bool)
    for spk, g in zip(speakers, assignment):
        c = chunks[spk.chunk_id]
        act[c.start_frame : c.start_frame + c.n_frames, g] |= spk.active_frames.astype(bool)
    for g in range(n_global):
        edges = np.diff(np.concatenate([[0], act[:, g].astype(np.int8), [0]]))
        for s, e in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            ann.add(f"spk{g}", round(s / fr, 6), round(e / fr, 6))
    ann.segments.sort(key=lambda s: (s.start, s.speaker))
    return ann


# --------------------------------------------------------------------------
# full recording


def _speakers_for(chunks, probs, threshold, embedder, cfg, recording_id):
    speakers = []
    for i, (c, p) in enumerate(zip(chunks, probs)):
        act = (p >= threshold).astype(np.int8)
        speakers += extract_embeddings(c, act, embedder, i, cfg.min_active, cfg.clean_frames, recording_id)
    return speakers


def _cluster_and_stitch(chunks, speakers, cluster_cfg, recording_id, n_frames):
    if not speakers:
        return Annotation(recording_id)
    assignment = ahc_cluster([s.embedding for s in speakers], cluster_cfg)
    return stitch(chunks, speakers, assignment, recording_id, n_frames)


def diarize(features: np.ndarray, frame_rate: float, model: ModelParams, cfg: PipelineConfig | None = None,
            recording_id: str = "rec", embedder: Embedder | None = None) -> Annotation:
    cfg = cfg or PipelineConfig()
    embedder = embedder or StatsPoolEmbedder()
    chunks = chunk_sequence(features, frame_rate, cfg.chunk_seconds, cfg.stride_seconds)
    probs = chunk_probabilities(chunks, model, cfg.batch_size)
    speakers = _speakers_for(chunks, probs, cfg.binarize_threshold, embedder, cfg, recording_id)
    return _cluster_and_stitch(chunks, speakers, cfg.cluster, recording_id, len(features))


# --------------------------------------------------------------------------
# tuning


def _frange(lo, hi, step):
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


@dataclass
class TuningGrid:
    binarize: tuple[float, ...] = _frange(0.3, 0.7, 0.1)
    cluster_threshold: tuple[float, ...] = _frange(0.3, 1.1, 0.1)
    min_cluster_size: tuple[int, ...] = (1, 2, 3)

    def points(self):
        return itertools.product(sorted(self.binarize), sorted(self.cluster_threshold), sorted(self.min_cluster_size))

    def __len__(self):
        return len(self.binarize) * len(self.cluster_threshold) * len(self.min_cluster_size)


@dataclass
class DevRecording:
    recording_id: str
    features: np.ndarray
    frame_rate: float
    reference: Annotation


@dataclass
class TuningResult:
    binarize_threshold: float
    cluster: ClusterConfig
    der: float
    table: list[dict]


def tune_hyperparams(dev: Sequence[DevRecording], model: ModelParams, grid: TuningGrid | None = None,
                     cfg: PipelineConfig | None = None, embedder: Embedder | None = None) -> TuningResult:
    """Grid point with the lowest mean DER (collar 0) over the dev recordings.

    Ties go to the smallest binarization threshold, then the smallest
    clustering threshold, then the smallest minimum cluster size.
    """
    grid = TuningGrid() if grid is None else grid
    cfg = cfg or PipelineConfig()
    embedder = embedder or StatsPoolEmbedder()
    if len(grid) == 0:
        raise ConfigError("empty tuning grid")
    if not dev:
        raise ContractError("need at least one dev recording")
    prepared = []
    for rec in dev:
        chunks = chunk_sequence(rec.features, rec.frame_rate, cfg.chunk_seconds, cfg.stride_seconds)
        prepared.append((rec, chunks, chunk_probabilities(chunks, model, cfg.batch_size)))
    table, best = [], None
    spk_cache: dict[tuple[int, float], list[LocalSpeaker]] = {}
    for b, thr, mcs in grid.points():
        ccfg = ClusterConfig(thr, mcs, cfg.cluster.metric)
        reports = []
        for r, (rec, chunks, probs) in enumerate(prepared):
            if (r, b) not in spk_cache:
                spk_cache[(r, b)] = _speakers_for(chunks, probs, b, embedder, cfg, rec.recording_id)
            hyp = _cluster_and_stitch(chunks, spk_cache[(r, b)], ccfg, rec.recording_id, len(rec.features))
            reports.append(der(rec.reference, hyp, 0.0))
        mean_der = float(np.mean([x.der for x in reports]))
        table.append({"binarize": b, "threshold": thr, "min_cluster_size": mcs, "der": mean_der})
        if best is None or mean_der < best[0]:
            best = (mean_der, b, ccfg)
    logger.info("tuning: best DER %.4f at binarize=%s %s", best[0], best[1], best[2])
    return TuningResult(best[1], best[2], best[0], table)


def evaluate(recordings: Sequence[DevRecording], model: ModelParams, cfg: PipelineConfig,
             embedder: Embedder | None = None) -> tuple[DerReport, list[Annotation], list[DerReport]]:
    """Diarize and score recordings; returns the pooled report, hypotheses and per-recording reports."""
    hyps, reports = [], []
    for rec in recordings:
        hyp = diarize(rec.features, rec.frame_rate, model, cfg, rec.recording_id, embedder)
        hyps.append(hyp)
        reports.append(der(rec.reference, hyp, 0.0))
    return aggregate(reports), hyps, reports
