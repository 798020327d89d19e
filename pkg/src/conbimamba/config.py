"""Run configuration: one JSON document with a section per subsystem.

Schema (every key optional; missing keys take the defaults below)::

    {
      "seed": 0,
      "model":    {ModelConfig fields},
      "train":    {TrainConfig fields},
      "pipeline": {PipelineConfig fields, "cluster": {ClusterConfig fields}},
      "grid":     {"binarize": [...], "cluster_threshold": [...], "min_cluster_size": [...]},
      "synth":    {SynthConfig fields},
      "corpus":   {CorpusConfig fields},
      "paths":    {PathsConfig fields}
    }

Unknown keys are rejected so that typos surface as configuration errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import ModelConfig
from .numcore import ConfigError
from .pipeline import ClusterConfig, PipelineConfig, TuningGrid
from .synthdata import SynthConfig


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    warmup_epochs: int = 5
    peak_lr: float = 2e-4
    floor_lr: float = 1e-6
    halving_patience: int = 2
    early_stop_patience: int = 10
    lambda_w: float = 0.5
    gamma: float = 2.0
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    cautious: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    chunk_seconds: float = 20.0
    average_last: int = 3
    augment_rotation: bool = False
    init_checkpoint: str | None = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 0 or self.halving_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("warmup_epochs must be >= 0 and patiences >= 1")
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ConfigError("need 0 < floor_lr <= peak_lr")
        if self.lambda_w < 0 or self.gamma < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigError("lambda_w, gamma and weight_decay must be >= 0 and clip_norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.chunk_seconds <= 0 or self.average_last < 1:
            raise ConfigError("chunk_seconds must be > 0 and average_last >= 1")


@dataclass
class CorpusConfig:
    """Split sizes of a synthetic corpus; each recording follows ``RunConfig.synth``."""

    train_seconds: float = 7200.0
    dev_seconds: float = 1200.0
    test_seconds: float = 1200.0

    def validate(self) -> None:
        if min(self.train_seconds, self.dev_seconds, self.test_seconds) < 0:
            raise ConfigError("split durations must be >= 0")


@dataclass
class PathsConfig:
    data: str = "data"
    checkpoint: str | None = None
    embeddings: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    grid: TuningGrid = field(default_factory=TuningGrid)
    synth: SynthConfig = field(default_factory=SynthConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.pipeline.cluster.validate()
        self.synth.validate()
        self.corpus.validate()
        if self.model.feature_dim != self.synth.feature_dim:
            raise ConfigError(f"model.feature_dim {self.model.feature_dim} != synth.feature_dim {self.synth.feature_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["grid"] = {k: list(v) for k, v in d["grid"].items()}
        return d


def _build(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"section '{section}': {exc}") from None


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    pipe = dict(d.get("pipeline") or {})
    cluster = _build(ClusterConfig, pipe.pop("cluster", None), "pipeline.cluster")
    pipeline = _build(PipelineConfig, pipe, "pipeline")
    pipeline.cluster = cluster
    grid = _build(TuningGrid, d.get("grid"), "grid")
    grid = TuningGrid(*(tuple(getattr(grid, f.name)) for f in fields(TuningGrid)))
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return RunConfig(
        seed=seed,
        model=_build(ModelConfig, d.get("model"), "model"),
        train=_build(TrainConfig, d.get("train"), "train"),
        pipeline=pipeline,
        grid=grid,
        synth=_build(SynthConfig, d.get("synth"), "synth"),
        corpus=_build(CorpusConfig, d.get("corpus"), "corpus"),
        paths=_build(PathsConfig, d.get("paths"), "paths"),
    )


def emit(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def parse(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(data)


def load(path: str | Path) -> RunConfig:
    return parse(Path(path).read_text())
