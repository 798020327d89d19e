"""Training loop: cautious AdamW, warm-up / plateau-halving schedule, early stopping.

Every epoch writes ``checkpoints/epoch_NNN.ckpt`` and appends one JSON line to
``metrics.jsonl``; when training stops the last ``average_last`` checkpoints
are averaged into ``final.ckpt``. Nothing time-dependent is logged, so two
runs with the same config and seed produce identical files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import numcore as nc
from .config import RunConfig, TrainConfig
from .dataset import Segment, collate, load_split, make_segments
from .encoder import Mode, ModelConfig, ModelParams, init_model, model_forward
from .losses import total_loss

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay and an optional cautious mask.

    With ``cautious`` the step is kept only where the Adam direction agrees in
    sign with the current gradient, rescaled by the inverse fraction kept.
    Weight decay applies to matrices and kernels only (``ndim >= 2``).
    """

    def __init__(self, params: list[nc.Tensor], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01, cautious=True):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay, self.cautious = weight_decay, cautious
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            u = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.cautious:
                keep = (u * g > 0).astype(np.float64)
                u = u * keep / max(keep.mean(), 1e-3)
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * u


def clip_grad_norm(params: list[nc.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class LrSchedule:
    """Linear warm-up to the peak, then halving on validation plateaus down to the floor."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.peak_lr
        self.best = np.inf
        self.bad = 0  # epochs since the last improvement
        self.since_halving = 0

    def lr_for(self, epoch: int) -> float:
        if epoch < self.cfg.warmup_epochs:
            self.lr = self.cfg.peak_lr * (epoch + 1) / self.cfg.warmup_epochs
        return self.lr

    def observe(self, epoch: int, val_loss: float) -> bool:
        """Record a validation loss; returns ``True`` when training should stop."""
        if val_loss < self.best:
            self.best, self.bad, self.since_halving = val_loss, 0, 0
        else:
            self.bad += 1
            self.since_halving += 1
            if epoch >= self.cfg.warmup_epochs and self.since_halving >= self.cfg.halving_patience:
                self.lr = max(self.lr / 2.0, self.cfg.floor_lr)
                self.since_halving = 0
        return self.bad >= self.cfg.early_stop_patience


def batches(segs: list[Segment], batch_size: int, rng: np.random.Generator | None) -> list[list[Segment]]:
    """Equal-length segments are batched together so padding only appears in mixed leftovers."""
    order = np.arange(len(segs)) if rng is None else rng.permutation(len(segs))
    by_len: dict[int, list[int]] = {}
    for i in order:
        by_len.setdefault(len(segs[i].features), []).append(int(i))
    out, rest = [], []
    for n in sorted(by_len, reverse=True):
        idx = by_len[n]
        full = len(idx) - len(idx) % batch_size
        out += [[segs[j] for j in idx[k:k + batch_size]] for k in range(0, full, batch_size)]
        rest += idx[full:]
    out += [[segs[j] for j in rest[k:k + batch_size]] for k in range(0, len(rest), batch_size)]
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def evaluate_loss(model: ModelParams, segs: list[Segment], cfg: TrainConfig) -> dict:
    sums = {"pit": 0.0, "bet": 0.0, "total": 0.0}
    n = 0
    with nc.no_grad():
        for batch in batches(segs, cfg.batch_size, None):
            x, y, m = collate(batch)
            p, o = model_forward(nc.Tensor(x, copy=False), model, Mode(training=False))
            _, st = total_loss(p, y, o, cfg.lambda_w, cfg.gamma, m)
            for k in sums:
                sums[k] += st[k] * len(batch)
            n += len(batch)
    return {k: v / max(n, 1) for k, v in sums.items()}


@dataclass
class TrainResult:
    model: ModelParams
    checkpoints: list[Path]
    final_checkpoint: Path
    metrics: list[dict]


def _round(x: float) -> float:
    return float(f"{x:.10g}")


def model_from_checkpoint(path: str | Path) -> ModelParams:
    state, meta = ckpt.load(path)
    if "model" not in meta:
        raise ckpt.CheckpointError(f"{path}: metadata lacks a model config")
    model = init_model(ModelConfig(**meta["model"]), 0)
    ckpt.load_state(model, state)
    return model


def train(run: RunConfig, out: str | Path, train_segs: list[Segment] | None = None,
          dev_segs: list[Segment] | None = None) -> TrainResult:
    """Train from ``run.paths.data`` (or the given segments) and write artifacts under ``out``."""
    run.validate()
    cfg = run.train
    out = Path(out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if train_segs is None:
        train_segs = make_segments(load_split(run.paths.data, "train"), cfg.chunk_seconds, run.model.n_speakers)
        dev_segs = make_segments(load_split(run.paths.data, "dev"), cfg.chunk_seconds, run.model.n_speakers)
    if not train_segs:
        raise ValueError("no training segments")
    dev_segs = dev_segs or []
    if cfg.init_checkpoint:
        model = model_from_checkpoint(cfg.init_checkpoint)
        if model.cfg.to_dict() != run.model.to_dict():
            raise nc.ConfigError("init_checkpoint was trained with a different model config")
    else:
        model = init_model(run.model, run.seed)
    params = [t for _, t in ckpt.named_parameters(model)]
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.cautious)
    sched = LrSchedule(cfg)
    rng = np.random.default_rng(run.seed + 1)
    mode = Mode(training=True, rate=run.model.dropout, rng=rng)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    rows, paths = [], []
    for epoch in range(cfg.epochs):
        lr = sched.lr_for(epoch)
        sums, n = {"pit": 0.0, "bet": 0.0, "total": 0.0}, 0
        for batch in batches(train_segs, cfg.batch_size, rng):
            x, y, m = collate(batch)
            if cfg.augment_rotation:
                x = np.stack([xi @ random_rotation(rng, x.shape[-1]) for xi in x])
            p, o = model_forward(nc.Tensor(x, copy=False), model, mode)
            loss, st = total_loss(p, y, o, cfg.lambda_w, cfg.gamma, m)
            for t in params:
                t.grad = None
            nc.backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step(lr)
            for k in sums:
                sums[k] += st[k] * len(batch)
            n += len(batch)
        val = evaluate_loss(model, dev_segs, cfg) if dev_segs else {k: sums[k] / n for k in sums}
        row = {"epoch": epoch, "lr": _round(lr),
               "train_pit": _round(sums["pit"] / n), "train_bet": _round(sums["bet"] / n),
               "train_total": _round(sums["total"] / n),
               "val_pit": _round(val["pit"]), "val_bet": _round(val["bet"]), "val_loss": _round(val["total"])}
        path = out / "checkpoints" / f"epoch_{epoch:03d}.ckpt"
        ckpt.save(path, ckpt.state_dict(model), {"model": run.model.to_dict(), "epoch": epoch})
        paths.append(path)
        rows.append(row)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, row["train_total"], row["val_loss"])
        if sched.observe(epoch, val["total"]):
            logger.info("early stop after epoch %d", epoch)
            break
    final = out / "final.ckpt"
    average_checkpoints(paths[-cfg.average_last:], final)
    model = model_from_checkpoint(final)
    return TrainResult(model, paths, final, rows)


def average_checkpoints(paths: list[str | Path], out: str | Path) -> None:
    if not paths:
        raise ckpt.CheckpointError("need at least one checkpoint to average")
    loaded = [ckpt.load(p) for p in paths]
    meta = dict(loaded[-1][1])
    meta["averaged_from"] = [Path(p).name for p in paths]
    ckpt.save(out, ckpt.average([s for s, _ in loaded]), meta)
