"""Selective state-space (Mamba) block and the external bidirectional wrapper.

The scan is a first-order linear recurrence ``h_t = a_t * h_{t-1} + b_t``
evaluated either sequentially or in two levels (independent chunk-local scans
vectorised across chunks, then a short carry scan across chunk boundaries).
Its gradient is the same recurrence run in reverse, so both directions share
:func:`linear_scan`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, ContractError, ShapeError, Tensor

__all__ = [
    "MambaConfig",
    "MambaCore",
    "MambaParams",
    "ExtBiMambaParams",
    "linear_scan",
    "selective_scan",
    "selective_scan_chunked",
    "init_mamba",
    "init_ext_bimamba",
    "mamba_forward",
    "ext_bimamba_forward",
]


@dataclass
class MambaConfig:
    d_model: int = 256
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    projections: str = "shared"  # or "separate"
    fusion: str = "add"  # or "concat"
    scan_chunk: int | None = None

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)

    def validate(self) -> None:
        if self.projections not in ("shared", "separate"):
            raise ConfigError(f"projections must be 'shared' or 'separate', got {self.projections!r}")
        if self.fusion not in ("add", "concat"):
            raise ConfigError(f"fusion must be 'add' or 'concat', got {self.fusion!r}")
        if self.fusion == "concat" and self.projections == "separate":
            raise ConfigError("concat fusion needs shared projections")
        if min(self.d_model, self.d_state, self.expand, self.d_conv, self.rank) < 1:
            raise ConfigError("Mamba sizes must be positive")


@dataclass
class MambaCore:
    """Direction-specific part of a Mamba block (conv, input-dependent SSM)."""

    conv_w: Tensor  # (d_conv, d_inner)
    conv_b: Tensor  # (d_inner,)
    x_proj: Tensor  # (d_inner, rank + 2 * d_state)
    dt_proj_w: Tensor  # (rank, d_inner)
    dt_proj_b: Tensor  # (d_inner,)
    A_log: Tensor  # (d_inner, d_state)
    D: Tensor  # (d_inner,)


@dataclass
class MambaParams:
    in_proj: Tensor  # (d_model, 2 * d_inner)
    core: MambaCore
    out_proj: Tensor  # (d_inner, d_model)


@dataclass
class ExtBiMambaParams:
    in_proj: Tensor
    fwd: MambaCore
    bwd: MambaCore
    out_proj: Tensor
    # only with projections="separate"
    in_proj_bwd: Tensor | None = None
    out_proj_bwd: Tensor | None = None
    cfg: MambaConfig = field(default_factory=MambaConfig, repr=False, compare=False)


# --------------------------------------------------------------------------
# scan kernels


def _seq_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    prev = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        prev = a[:, t] * prev + b[:, t]
        h[:, t] = prev
    return h


def _chunked_scan(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    n, T = b.shape[0], b.shape[1]
    rest = b.shape[2:]
    nc_ = -(-T // chunk)
    pad = nc_ * chunk - T
    if pad:
        widths = [(0, 0), (0, pad)] + [(0, 0)] * len(rest)
        a = np.pad(a, widths, constant_values=1.0)
        b = np.pad(b, widths)
    a = a.reshape((n, nc_, chunk) + rest)
    b = b.reshape((n, nc_, chunk) + rest)
    # chunk-local scans and decay products, vectorised over chunks
    local = np.empty_like(b)
    decay = np.empty_like(a)
    local[:, :, 0] = b[:, :, 0]
    decay[:, :, 0] = a[:, :, 0]
    for i in range(1, chunk):
        local[:, :, i] = a[:, :, i] * local[:, :, i - 1] + b[:, :, i]
        decay[:, :, i] = a[:, :, i] * decay[:, :, i - 1]
    # carry into each chunk
    carry = np.zeros((n, nc_) + rest)
    for j in range(1, nc_):
        carry[:, j] = decay[:, j - 1, -1] * carry[:, j - 1] + local[:, j - 1, -1]
    h = local + decay * carry[:, :, None]
    return h.reshape((n, nc_ * chunk) + rest)[:, :T]


def _adjoint_scan(dA: np.ndarray, b: np.ndarray, chunk: int | None) -> np.ndarray:
    """``G_t = b_t + dA_{t+1} * G_{t+1}`` with ``G_{T-1} = b_{T-1}``."""
    T = b.shape[1]
    if chunk is not None and chunk < T:
        a_next = np.ones_like(dA)
        a_next[:, :-1] = dA[:, 1:]
        return linear_scan(a_next, b, chunk, reverse=True)
    G = b
    for t in range(T - 2, -1, -1):
        G[:, t] += dA[:, t + 1] * G[:, t + 1]
    return G


def linear_scan(a: np.ndarray, b: np.ndarray, chunk: int | None = None, reverse: bool = False) -> np.ndarray:
    """All states of ``h_t = a_t * h_{t-1} + b_t`` along axis 1, ``h_{-1} = 0``.

    With ``reverse`` the recurrence runs from the last step backwards:
    ``h_t = a_t * h_{t+1} + b_t``.
    """
    if a.shape != b.shape:
        raise ShapeError(f"linear_scan: {a.shape} vs {b.shape}")
    if reverse:
        a, b = a[:, ::-1], b[:, ::-1]
    T = b.shape[1]
    if chunk is None or chunk >= T:
        h = _seq_scan(a, b)
    else:
        if chunk < 1:
            raise ConfigError(f"chunk size must be >= 1, got {chunk}")
        h = _chunked_scan(a, b, chunk)
    return np.ascontiguousarray(h[:, ::-1]) if reverse else h


def selective_scan(u, delta, A, B, C, D, chunk: int | None = None) -> Tensor:
    """Discretised selective SSM over time.

    Shapes (leading batch axis optional): ``u, delta: (T, d_inner)``,
    ``A: (d_inner, d_state)``, ``B, C: (T, d_state)``, ``D: (d_inner,)``.
    Per channel ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t`` and
    ``y_t = <C_t, h_t> + D u_t``.
    """
    u, delta, A, B, C, D = (nc._as_tensor(v) for v in (u, delta, A, B, C, D))
    batched = u.ndim == 3
    if u.ndim not in (2, 3):
        raise ShapeError(f"selective_scan: u must be (T, d) or (batch, T, d), got {u.shape}")
    di, ds = A.shape
    lead = u.shape[:-1]
    if delta.shape != u.shape or u.shape[-1] != di or D.shape != (di,):
        raise ShapeError(f"selective_scan: u {u.shape}, delta {delta.shape}, A {A.shape}, D {D.shape}")
    if B.shape != lead + (ds,) or C.shape != lead + (ds,):
        raise ShapeError(f"selective_scan: B {B.shape} / C {C.shape} do not match {lead + (ds,)}")
    if not np.all(delta.data > 0):
        raise ContractError("selective_scan: every step size delta must be positive")

    ud, dd, Bd, Cd = (v.data if batched else v.data[None] for v in (u, delta, B, C))
    dA = np.exp(dd[..., None] * A.data)  # (n, T, di, ds)
    dBu = (dd * ud)[..., None] * Bd[:, :, None, :]
    H = linear_scan(dA, dBu, chunk)
    y = (H @ Cd[..., None])[..., 0] + ud * D.data

    def bw(g):
        g = g if batched else g[None]
        gD = (g * ud).sum(axis=(0, 1))
        gC = (g[..., None, :] @ H)[..., 0, :]
        # adjoint state: G_t = dL/dH_t (direct) + exp(delta_{t+1} A) G_{t+1}
        G = _adjoint_scan(dA, g[..., None] * Cd[:, :, None, :], chunk)
        # d/d(delta*A) at step t is G_t * H_{t-1} * dA_t, zero at t = 0
        g_dA = np.zeros_like(G)
        np.multiply(G[:, 1:], H[:, :-1], out=g_dA[:, 1:])
        g_dA[:, 1:] *= dA[:, 1:]
        gA = np.einsum("ntis,nti->is", g_dA, dd, optimize=True)
        GB = (G @ Bd[..., None])[..., 0]
        gdelta = np.einsum("ntis,is->nti", g_dA, A.data, optimize=True)
        gdelta += GB * ud
        gu = GB * dd + g * D.data
        gB = ((dd * ud)[..., None, :] @ G)[..., 0, :]
        out = (gu, gdelta, gA, gB, gC, gD)
        if not batched:
            out = (gu[0], gdelta[0], gA, gB[0], gC[0], gD)
        return out

    return nc.record(y if batched else y[0], (u, delta, A, B, C, D), bw)


def selective_scan_chunked(u, delta, A, B, C, D, chunk: int = 64) -> Tensor:
    """:func:`selective_scan` via the two-level chunked recurrence."""
    return selective_scan(u, delta, A, B, C, D, chunk=chunk)


# --------------------------------------------------------------------------
# parameters


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def _init_core(cfg: MambaConfig, rng: np.random.Generator) -> MambaCore:
    di, ds, r = cfg.d_inner, cfg.d_state, cfg.rank
    dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=di))
    dt_bias = dt + np.log(-np.expm1(-dt))  # softplus^{-1}(dt)
    return MambaCore(
        conv_w=nc.parameter(_uniform(rng, 1.0 / math.sqrt(cfg.d_conv), (cfg.d_conv, di))),
        conv_b=nc.parameter(_uniform(rng, 1.0 / math.sqrt(cfg.d_conv), (di,))),
        x_proj=nc.parameter(_uniform(rng, 1.0 / math.sqrt(di), (di, r + 2 * ds))),
        dt_proj_w=nc.parameter(_uniform(rng, r**-0.5, (r, di))),
        dt_proj_b=nc.parameter(dt_bias),
        A_log=nc.parameter(np.log(np.tile(np.arange(1, ds + 1, dtype=np.float64), (di, 1)))),
        D=nc.parameter(np.ones(di)),
    )


def init_mamba(cfg: MambaConfig, rng: np.random.Generator) -> MambaParams:
    d, di = cfg.d_model, cfg.d_inner
    return MambaParams(
        in_proj=nc.parameter(_uniform(rng, 1.0 / math.sqrt(d), (d, 2 * di))),
        core=_init_core(cfg, rng),
        out_proj=nc.parameter(_uniform(rng, 1.0 / math.sqrt(di), (di, d))),
    )


def init_ext_bimamba(cfg: MambaConfig, rng: np.random.Generator) -> ExtBiMambaParams:
    cfg.validate()
    d, di = cfg.d_model, cfg.d_inner
    width = 2 * di if cfg.fusion == "concat" else di
    p = ExtBiMambaParams(
        in_proj=nc.parameter(_uniform(rng, 1.0 / math.sqrt(d), (d, 2 * di))),
        fwd=_init_core(cfg, rng),
        bwd=_init_core(cfg, rng),
        out_proj=nc.parameter(_uniform(rng, 1.0 / math.sqrt(width), (width, d))),
        cfg=cfg,
    )
    if cfg.projections == "separate":
        p.in_proj_bwd = nc.parameter(_uniform(rng, 1.0 / math.sqrt(d), (d, 2 * di)))
        p.out_proj_bwd = nc.parameter(_uniform(rng, 1.0 / math.sqrt(di), (di, d)))
    return p


# --------------------------------------------------------------------------
# forward passes (time axis is -2)


def _core_forward(xs: Tensor, core: MambaCore, chunk: int | None) -> Tensor:
    ds = core.A_log.shape[1]
    r = core.dt_proj_w.shape[0]
    u = nc.silu(nc.add(nc.depthwise_conv1d(xs, core.conv_w, padding="causal"), core.conv_b))
    proj = nc.matmul(u, core.x_proj)
    dt_in = nc.slice_last(proj, 0, r)
    Bm = nc.slice_last(proj, r, r + ds)
    Cm = nc.slice_last(proj, r + ds, r + 2 * ds)
    delta = nc.softplus(nc.add(nc.matmul(dt_in, core.dt_proj_w), core.dt_proj_b))
    A = nc.neg(nc.exp(core.A_log))
    return selective_scan(u, delta, A, Bm, Cm, core.D, chunk=chunk)


def _split_stream(x: Tensor, in_proj: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != in_proj.shape[0]:
        raise ShapeError(f"Mamba block expects width {in_proj.shape[0]}, got input {x.shape}")
    di = in_proj.shape[1] // 2
    xz = nc.matmul(x, in_proj)
    return nc.slice_last(xz, 0, di), nc.slice_last(xz, di, 2 * di)


def mamba_forward(x: Tensor, p: MambaParams, direction: str = "forward", chunk: int | None = None) -> Tensor:
    """Unidirectional Mamba block; ``direction="backward"`` runs it on reversed time."""
    if direction not in ("forward", "backward"):
        raise ConfigError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if x.ndim < 2:
        raise ShapeError(f"Mamba block expects (..., T, d), got {x.shape}")
    if direction == "backward":
        x = nc.flip(x, -2)
    xs, z = _split_stream(x, p.in_proj)
    y = nc.mul(_core_forward(xs, p.core, chunk), nc.silu(z))
    out = nc.matmul(y, p.out_proj)
    return nc.flip(out, -2) if direction == "backward" else out


def ext_bimamba_forward(x: Tensor, p: ExtBiMambaParams, chunk: int | None = None) -> Tensor:
    """Forward core on the sequence plus backward core on its time reversal."""
    if x.ndim < 2:
        raise ShapeError(f"ExtBiMamba expects (..., T, d), got {x.shape}")
    chunk = p.cfg.scan_chunk if chunk is None else chunk
    if p.in_proj_bwd is not None:
        fwd = mamba_forward(x, MambaParams(p.in_proj, p.fwd, p.out_proj), "forward", chunk)
        bwd = mamba_forward(x, MambaParams(p.in_proj_bwd, p.bwd, p.out_proj_bwd), "backward", chunk)
        return nc.add(fwd, bwd)
    xs, z = _split_stream(x, p.in_proj)
    yf = _core_forward(xs, p.fwd, chunk)
    yb = nc.flip(_core_forward(nc.flip(xs, -2), p.bwd, chunk), -2)
    gate = nc.silu(z)
    if p.cfg.fusion == "concat":
        y = nc.concat([nc.mul(yf, gate), nc.mul(yb, gate)], axis=-1)
    else:
        y = nc.mul(nc.add(yf, yb), gate)
    return nc.matmul(y, p.out_proj)
