"""Training objectives: permutation-invariant BCE and the boundary focal loss."""

from __future__ import annotations

import itertools

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, ContractError, ShapeError, Tensor

LOG_FLOOR = 1e-12
DEFAULT_RATIO = 0.1
MAX_PIT_SPEAKERS = 6


def derive_change_labels(y: np.ndarray) -> np.ndarray:
    """``c[b, t] = 1`` iff any speaker's activity differs between frames ``t`` and ``t+1``.

    ``y`` is ``(B, T, K)`` (or ``(T, K)`` for a single item); returns ``(B, T-1)``.
    """
    y = np.asarray(y)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.ndim != 3:
        raise ShapeError(f"labels must be (B, T, K), got {y.shape}")
    if y.shape[1] < 2:
        raise ContractError("change labels need at least two frames")
    c = np.any(y[:, 1:] != y[:, :-1], axis=-1).astype(np.float64)
    return c[0] if single else c


def positive_ratio(c: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Fraction of change frames, or 0.1 when there are none."""
    c = np.asarray(c, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        n, pos = m.sum(), c[m].sum()
    else:
        n, pos = c.size, c.sum()
    if n < 1:
        raise ContractError("positive_ratio needs at least one sample")
    return DEFAULT_RATIO if pos == 0 else float(pos / n)


def bet_loss(o, c: np.ndarray, alpha: float, gamma: float = 2.0, mask: np.ndarray | None = None) -> Tensor:
    """Focal loss on change logits.

    ``p = sigmoid(o)`` on change frames and ``1 - sigmoid(o)`` elsewhere; the
    loss is the mean of ``-alpha * (1 - p)**gamma * log(p)`` over unmasked frames.
    """
    o = nc._as_tensor(o)
    c = np.asarray(c, dtype=np.float64)
    if o.shape != c.shape:
        raise ShapeError(f"bet_loss: logits {o.shape} vs change labels {c.shape}")
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"bet_loss: alpha must be in (0, 1], got {alpha}")
    if gamma < 0:
        raise ContractError(f"bet_loss: gamma must be >= 0, got {gamma}")
    # sigmoid of the signed logit is p; sigmoid of its negation is 1 - p
    signed = nc.mul(o, 2.0 * c - 1.0)
    p = nc.sigmoid(signed)
    logp = nc.log(nc.clip(p, LOG_FLOOR, 1.0))
    term = nc.mul(logp, -alpha)
    if gamma != 0:
        term = nc.mul(term, nc.power(nc.sigmoid(nc.neg(signed)), gamma))
    return _masked_mean(term, mask)


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return nc.mean(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"mask {m.shape} vs values {x.shape}")
    n = m.sum()
    if n < 1:
        raise ContractError("mask excludes every frame")
    return nc.mul(nc.tsum(nc.mul(x, m)), 1.0 / n)


def _bce_terms(p: Tensor, y: np.ndarray) -> Tensor:
    lp = nc.log(nc.clip(p, LOG_FLOOR, 1.0))
    lq = nc.log(nc.clip(nc.sub(1.0, p), LOG_FLOOR, 1.0))
    return nc.neg(nc.add(nc.mul(lp, y), nc.mul(lq, 1.0 - y)))


def _bce_np(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -(y * np.log(np.clip(p, LOG_FLOOR, 1.0)) + (1 - y) * np.log(np.clip(1 - p, LOG_FLOOR, 1.0)))


def best_permutations(p: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None) -> list[tuple[int, ...]]:
    """Per item, the label-column order minimising mean BCE (first in lexicographic order on ties)."""
    B, T, K = y.shape
    if K > MAX_PIT_SPEAKERS:
        raise ConfigError(f"exhaustive PIT supports at most {MAX_PIT_SPEAKERS} speakers, got {K}")
    m = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=np.float64)
    # pair[b, i, j]: BCE of output column i against label column j, summed over frames
    pair = np.einsum("btij,bt->bij", _bce_np(p[..., :, None], y[..., None, :]), m)
    perms = list(itertools.permutations(range(K)))
    cols = np.arange(K)
    best = []
    for b in range(B):
        costs = [pair[b, cols, list(pi)].sum() for pi in perms]
        best.append(perms[int(np.argmin(costs))])
    return best


def pit_bce_loss(p, y: np.ndarray, mask: np.ndarray | None = None) -> tuple[Tensor, list[tuple[int, ...]]]:
    """Permutation-invariant BCE.

    Returns the batch mean of each item's minimal frame-wise BCE and, per item,
    the permutation ``pi`` such that output column ``k`` is scored against
    label column ``pi[k]``.
    """
    p = nc._as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 2
    if single:
        y = y[None]
        p = nc.reshape(p, (1,) + p.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    if p.shape != y.shape:
        raise ShapeError(f"pit_bce_loss: probabilities {p.shape} vs labels {y.shape}")
    perms = best_permutations(p.data, y, mask)
    y_perm = np.stack([y[b][:, list(pi)] for b, pi in enumerate(perms)])
    terms = _bce_terms(p, y_perm)
    B, T, K = y.shape
    if mask is None:
        return nc.mean(terms), perms
    m = np.asarray(mask, dtype=np.float64)
    # each item's mean over its own valid frames, then mean over items
    weights = m[..., None] / (np.maximum(m.sum(axis=1), 1.0)[:, None, None] * K * B)
    return nc.tsum(nc.mul(terms, np.broadcast_to(weights, terms.shape).copy())), perms


def total_loss(p, y: np.ndarray, o, lambda_w: float = 0.5, gamma: float = 2.0,
               mask: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """``L_PIT + lambda_w * L_BET`` with the focal weight set to the batch's change ratio.

    ``o`` holds one logit per frame; the first ``T - 1`` are scored against the
    change labels. Returns the loss and a dict of float components.
    """
    if lambda_w < 0:
        raise ContractError("lambda_w must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    o = nc._as_tensor(o)
    pit, perms = pit_bce_loss(p, y, mask)
    stats = {"pit": pit.item(), "perms": perms}
    if lambda_w == 0:
        stats.update(bet=0.0, total=pit.item())
        return pit, stats
    yb = y if y.ndim == 3 else y[None]
    ob = o if o.ndim == 2 else nc.reshape(o, (1,) + o.shape)
    c = derive_change_labels(yb)
    cmask = None
    if mask is not None:
        mb = np.asarray(mask, dtype=bool)
        mb = mb if mb.ndim == 2 else mb[None]
        cmask = mb[:, 1:] & mb[:, :-1]
    alpha = positive_ratio(c, cmask)
    T = yb.shape[1]
    o_trans = nc.index(ob, (slice(None), slice(0, T - 1)))
    bet = bet_loss(o_trans, c, alpha, gamma, cmask)
    total = nc.add(pit, nc.mul(bet, lambda_w))
    stats.update(bet=bet.item(), total=total.item(), alpha=alpha)
    return total, stats
