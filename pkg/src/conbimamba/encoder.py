"""ConBiMamba encoder, masked layer-wise feature aggregation and output heads.

A ConBiMamba layer is a Macaron Conformer block whose self-attention is
replaced by :func:`~conbimamba.ssm.ext_bimamba_forward`; its convolution
module runs three depthwise branches of different widths and averages them.
All forwards accept ``(T, d)`` or ``(batch, T, d)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, DegenerateInputError, ShapeError, Tensor
from .ssm import ExtBiMambaParams, MambaConfig, ext_bimamba_forward, init_ext_bimamba


@dataclass
class ModelConfig:
    feature_dim: int = 64
    d_model: int = 256
    n_layers: int = 7
    n_speakers: int = 4
    kernels: tuple[int, ...] = (15, 31, 63)
    ffn_mult: int = 4
    change_hidden: int = 128
    dropout: float = 0.1
    lfa_mask: tuple[int, ...] = (0, 0, 0, 0, 1, 1, 1)
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None
    projections: str = "shared"
    fusion: str = "add"
    scan_chunk: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.lfa_mask = tuple(int(m) for m in self.lfa_mask)

    def mamba(self) -> MambaConfig:
        return MambaConfig(
            d_model=self.d_model,
            d_state=self.d_state,
            expand=self.expand,
            d_conv=self.d_conv,
            dt_rank=self.dt_rank,
            projections=self.projections,
            fusion=self.fusion,
            scan_chunk=self.scan_chunk,
        )

    def validate(self) -> None:
        if len(self.lfa_mask) != self.n_layers:
            raise ConfigError(f"lfa_mask has {len(self.lfa_mask)} entries for {self.n_layers} layers")
        if any(m not in (0, 1) for m in self.lfa_mask):
            raise ConfigError("lfa_mask entries must be 0 or 1")
        if not any(self.lfa_mask):
            raise DegenerateInputError("lfa_mask selects no layer")
        if len(self.kernels) != 3 or any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise ConfigError(f"need exactly three odd depthwise kernel widths, got {self.kernels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        self.mamba().validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        d["lfa_mask"] = list(self.lfa_mask)
        return d


@dataclass
class FeedForwardParams:
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ConvModuleParams:
    ln_g: Tensor
    ln_b: Tensor
    pw1_w: Tensor  # d -> 2d, followed by GLU
    pw1_b: Tensor
    branches: list[Tensor]  # three (k, d) depthwise kernels
    norm_g: Tensor
    norm_b: Tensor
    pw2_w: Tensor
    pw2_b: Tensor


@dataclass
class ConBiMambaLayerParams:
    ffn1: FeedForwardParams
    mamba_ln_g: Tensor
    mamba_ln_b: Tensor
    ext_bimamba: ExtBiMambaParams
    conv: ConvModuleParams
    ffn2: FeedForwardParams
    final_ln_g: Tensor
    final_ln_b: Tensor


@dataclass
class LfaParams:
    alpha: Tensor  # (L,)
    norm_g: Tensor
    norm_b: Tensor
    mask: np.ndarray = field(default_factory=lambda: np.ones(7))  # static, not trained


@dataclass
class ChangeHeadParams:
    w1: Tensor  # (d, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, 1)
    b2: Tensor  # (1,)


@dataclass
class ModelParams:
    input_proj_w: Tensor
    input_proj_b: Tensor
    layers: list[ConBiMambaLayerParams]
    lfa: LfaParams
    diar_w: Tensor
    diar_b: Tensor
    change: ChangeHeadParams
    cfg: ModelConfig = field(default_factory=ModelConfig, repr=False)


# --------------------------------------------------------------------------
# initialisation


def _linear(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return nc.parameter(rng.uniform(-bound, bound, (fan_in, fan_out))), nc.parameter(
        rng.uniform(-bound, bound, fan_out)
    )


def _norm(d):
    return nc.parameter(np.ones(d)), nc.parameter(np.zeros(d))


def _ffn(rng, d, mult):
    g, b = _norm(d)
    w1, b1 = _linear(rng, d, mult * d)
    w2, b2 = _linear(rng, mult * d, d)
    return FeedForwardParams(g, b, w1, b1, w2, b2)


def init_layer(cfg: ModelConfig, rng: np.random.Generator) -> ConBiMambaLayerParams:
    d = cfg.d_model
    ffn1 = _ffn(rng, d, cfg.ffn_mult)
    mg, mb = _norm(d)
    bim = init_ext_bimamba(cfg.mamba(), rng)
    cg, cb = _norm(d)
    pw1_w, pw1_b = _linear(rng, d, 2 * d)
    branches = [nc.parameter(rng.uniform(-1, 1, (k, d)) / math.sqrt(k)) for k in cfg.kernels]
    ng, nb = _norm(d)
    pw2_w, pw2_b = _linear(rng, d, d)
    conv = ConvModuleParams(cg, cb, pw1_w, pw1_b, branches, ng, nb, pw2_w, pw2_b)
    ffn2 = _ffn(rng, d, cfg.ffn_mult)
    fg, fb = _norm(d)
    return ConBiMambaLayerParams(ffn1, mg, mb, bim, conv, ffn2, fg, fb)


def init_model(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    in_w, in_b = _linear(rng, cfg.feature_dim, d)
    layers = [init_layer(cfg, rng) for _ in range(cfg.n_layers)]
    lg, lb = _norm(d)
    lfa = LfaParams(nc.parameter(np.zeros(cfg.n_layers)), lg, lb, np.array(cfg.lfa_mask, dtype=float))
    dw, db = _linear(rng, d, cfg.n_speakers)
    w1, b1 = _linear(rng, d, cfg.change_hidden)
    w2, b2 = _linear(rng, cfg.change_hidden, 1)
    return ModelParams(in_w, in_b, layers, lfa, dw, db, ChangeHeadParams(w1, b1, w2, b2), cfg)


# --------------------------------------------------------------------------
# forward


@dataclass
class Mode:
    """Dropout state threaded through a forward pass."""

    training: bool = False
    rate: float = 0.1
    rng: np.random.Generator | None = None

    def drop(self, x: Tensor) -> Tensor:
        return nc.dropout(x, self.rate, self.rng, self.training)


def _check_width(x: Tensor, d: int, what: str) -> None:
    if x.ndim < 2 or x.shape[-1] != d:
        raise ShapeError(f"{what} expects (..., T, {d}), got {x.shape}")


def feed_forward(x: Tensor, p: FeedForwardParams, mode: Mode, eps: float = 1e-5) -> Tensor:
    h = nc.layer_norm(x, p.ln_g, p.ln_b, eps)
    h = mode.drop(nc.silu(nc.add(nc.matmul(h, p.w1), p.b1)))
    return mode.drop(nc.add(nc.matmul(h, p.w2), p.b2))


def conv_module(x: Tensor, p: ConvModuleParams, mode: Mode, eps: float = 1e-5) -> Tensor:
    h = nc.layer_norm(x, p.ln_g, p.ln_b, eps)
    h = nc.glu(nc.add(nc.matmul(h, p.pw1_w), p.pw1_b))
    outs = [nc.depthwise_conv1d(h, k, padding="same") for k in p.branches]
    h = nc.mul(nc.add(nc.add(outs[0], outs[1]), outs[2]), 1.0 / 3.0)
    h = nc.silu(nc.layer_norm(h, p.norm_g, p.norm_b, eps))
    return mode.drop(nc.add(nc.matmul(h, p.pw2_w), p.pw2_b))


def conbimamba_layer_forward(x: Tensor, p: ConBiMambaLayerParams, mode: Mode | None = None,
                             eps: float = 1e-5) -> Tensor:
    mode = mode or Mode()
    _check_width(x, p.final_ln_g.shape[0], "ConBiMamba layer")
    x = nc.add(x, nc.mul(feed_forward(x, p.ffn1, mode, eps), 0.5))
    x = nc.add(x, mode.drop(ext_bimamba_forward(nc.layer_norm(x, p.mamba_ln_g, p.mamba_ln_b, eps), p.ext_bimamba)))
    x = nc.add(x, conv_module(x, p.conv, mode, eps))
    x = nc.add(x, nc.mul(feed_forward(x, p.ffn2, mode, eps), 0.5))
    return nc.layer_norm(x, p.final_ln_g, p.final_ln_b, eps)


def encoder_forward(features: Tensor, p: ModelParams, mode: Mode | None = None) -> list[Tensor]:
    """Outputs of every layer; element ``l`` feeds element ``l + 1``."""
    mode = mode or Mode()
    features = nc._as_tensor(features)
    _check_width(features, p.cfg.feature_dim, "encoder")
    h = nc.add(nc.matmul(features, p.input_proj_w), p.input_proj_b)
    outs = []
    for layer in p.layers:
        h = conbimamba_layer_forward(h, layer, mode, p.cfg.ln_eps)
        outs.append(h)
    return outs


def lfa_weights(p: LfaParams) -> Tensor:
    """Softmax of the layer scores with masked layers pinned to ``-inf``."""
    mask = np.asarray(p.mask)
    if mask.shape != p.alpha.shape:
        raise ShapeError(f"LFA mask {mask.shape} vs alpha {p.alpha.shape}")
    if not np.any(mask == 1):
        raise DegenerateInputError("LFA mask selects no layer")
    return nc.softmax(nc.masked_fill(p.alpha, mask == 0, -np.inf))


def lfa_aggregate(layer_outputs: list[Tensor], p: LfaParams, mode: Mode | None = None,
                  eps: float = 1e-5) -> Tensor:
    mode = mode or Mode()
    if len(layer_outputs) != p.alpha.shape[0]:
        raise ShapeError(f"LFA got {len(layer_outputs)} layer outputs for {p.alpha.shape[0]} weights")
    w = lfa_weights(p)
    acc = None
    for l, h in enumerate(layer_outputs):
        term = nc.mul(h, nc.index(w, l))
        acc = term if acc is None else nc.add(acc, term)
    return mode.drop(nc.layer_norm(acc, p.norm_g, p.norm_b, eps))


def diar_head(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-frame, per-speaker activity probabilities."""
    return nc.sigmoid(nc.add(nc.matmul(h, w), b))


def change_head(h: Tensor, p: ChangeHeadParams) -> Tensor:
    """Raw change logits, one per frame; frame ``t`` scores the ``(t, t+1)`` transition."""
    hidden = nc.relu(nc.add(nc.matmul(h, p.w1), p.b1))
    o = nc.add(nc.matmul(hidden, p.w2), p.b2)
    return nc.reshape(o, o.shape[:-1])


def model_forward(features: Tensor, p: ModelParams, mode: Mode | None = None) -> tuple[Tensor, Tensor]:
    """Activity probabilities ``(..., T, K)`` and change logits ``(..., T)``."""
    mode = mode or Mode(rate=p.cfg.dropout)
    h = lfa_aggregate(encoder_forward(features, p, mode), p.lfa, mode, p.cfg.ln_eps)
    return diar_head(h, p.diar_w, p.diar_b), change_head(h, p.change)
