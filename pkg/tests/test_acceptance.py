"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
The collected lines are repeated in the terminal summary. Criteria 7 and 8
train three desk-scale models and take a while on a single core.
"""

import itertools
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conbimamba import numcore as nc  # noqa: E402
from conbimamba.checkpoint import named_parameters  # noqa: E402
from conbimamba.cli import main as cli_main  # noqa: E402
from conbimamba.config import CorpusConfig, RunConfig, TrainConfig, emit  # noqa: E402
from conbimamba.dataset import make_segments, synthesize_split  # noqa: E402
from conbimamba.encoder import (  # noqa: E402
    ModelConfig,
    Mode,
    change_head,
    conbimamba_layer_forward,
    conv_module,
    diar_head,
    encoder_forward,
    feed_forward,
    init_layer,
    init_model,
    lfa_aggregate,
    lfa_weights,
    model_forward,
)
from conbimamba.losses import bet_loss, derive_change_labels, pit_bce_loss, total_loss  # noqa: E402
from conbimamba.pipeline import PipelineConfig, TuningGrid, evaluate, tune_hyperparams  # noqa: E402
from conbimamba.scoring import Annotation, aggregate, boundary_der, der  # noqa: E402
from conbimamba.ssm import (  # noqa: E402
    MambaConfig,
    ext_bimamba_forward,
    init_ext_bimamba,
    init_mamba,
    mamba_forward,
    selective_scan,
    selective_scan_chunked,
)
from conbimamba.synthdata import SynthConfig  # noqa: E402
from conbimamba.train import train  # noqa: E402
from gradutil import rel_error  # noqa: E402

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print(line)
    assert ok, line


# --------------------------------------------------------------------------
# 1. scan oracle


def naive_scan(u, delta, A, B, C, D):
    T, di = u.shape
    ds = A.shape[1]
    y = np.zeros((T, di))
    for c in range(di):
        h = [0.0] * ds
        for t in range(T):
            acc = 0.0
            for n in range(ds):
                h[n] = np.exp(delta[t, c] * A[c, n]) * h[n] + delta[t, c] * B[t, n] * u[t, c]
                acc += C[t, n] * h[n]
            y[t, c] = acc + D[c] * u[t, c]
    return y


def test_criterion_1_scan_oracle():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_full = worst_chunk = 0.0
    for _ in range(100):
        T, di, ds = int(rng.integers(1, 33)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        args = (rng.standard_normal((T, di)), rng.uniform(0.01, 1.0, (T, di)), -rng.uniform(0.1, 2.0, (di, ds)),
                rng.standard_normal((T, ds)), rng.standard_normal((T, ds)), rng.standard_normal(di))
        ref = naive_scan(*args)
        worst_full = max(worst_full, float(np.abs(selective_scan(*args).data - ref).max()))
        for chunk in sorted({1, 2, 3, max(T // 2, 1), T}):
            got = selective_scan_chunked(*args, chunk=chunk).data
            worst_chunk = max(worst_chunk, float(np.abs(got - ref).max()))
    elapsed = time.perf_counter() - t0
    report(1, worst_full <= 1e-10 and worst_chunk <= 1e-8 and elapsed < 5.0,
           f"max diff {worst_full:.1e} <= 1e-10, chunked {worst_chunk:.1e} <= 1e-8, {elapsed:.2f} s < 5 s")


# --------------------------------------------------------------------------
# 2. gradient suite


def fd_check(build, params, rng, step=1e-5, max_coords=48):
    """Worst relative error between autodiff and central differences.

    Tensors larger than ``max_coords`` are checked on a random subset of coordinates.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    nc.backward(build())
    worst = 0.0
    for p in params:
        auto = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = np.arange(p.size) if p.size <= max_coords else rng.choice(p.size, max_coords, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + step
            hi = build().item()
            flat[i] = keep - step
            lo = build().item()
            flat[i] = keep
            num[j] = (hi - lo) / (2 * step)
        worst = max(worst, rel_error(auto[idx], num))
    return worst


def away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(lo, 1.0, shape)


def grad_cases(rng):
    """``name -> (scalar builder, params)``; each output is contracted with fixed random weights."""
    def T(*shape, pos=False, kink=False):
        if kink:
            return nc.Tensor(away_from_zero(rng, shape))
        return nc.Tensor(rng.uniform(0.5, 2.0, shape) if pos else rng.uniform(-1, 1, shape))

    def weighted(f, *params):
        w = rng.standard_normal(f().shape)
        return lambda: nc.tsum(nc.mul(f(), w)), list(params)

    cases = {}
    a, b = T(3, 4), T(3, 4)
    cases["add"] = weighted(lambda: nc.add(a, b), a, b)
    cases["sub"] = weighted(lambda: nc.sub(a, b), a, b)
    cases["mul"] = weighted(lambda: nc.mul(a, b), a, b)
    p, q = T(3, 4), T(3, 4, pos=True)
    cases["div"] = weighted(lambda: nc.div(p, q), p, q)
    bc, row = T(3, 4), T(4)
    cases["broadcast add"] = weighted(lambda: nc.add(bc, row), bc, row)
    n = T(2, 3)
    cases["neg"] = weighted(lambda: nc.neg(n), n)
    m1, m2 = T(3, 4), T(4, 2)
    cases["matmul"] = weighted(lambda: nc.matmul(m1, m2), m1, m2)
    bm1, bm2 = T(2, 3, 4), T(4, 5)
    cases["batched matmul"] = weighted(lambda: nc.matmul(bm1, bm2), bm1, bm2)
    for name in ["sigmoid", "silu", "softplus", "exp"]:
        x = T(3, 5)
        cases[name] = weighted(lambda x=x, f=getattr(nc, name): f(x), x)
    r = T(3, 5, kink=True)
    cases["relu"] = weighted(lambda: nc.relu(r), r)
    g = T(3, 6)
    cases["glu"] = weighted(lambda: nc.glu(g), g)
    lg = T(4, pos=True)
    cases["log"] = weighted(lambda: nc.log(lg), lg)
    pw = T(4, pos=True)
    cases["power"] = weighted(lambda: nc.power(pw, 1.5), pw)
    cl = nc.Tensor(np.array([-0.9, -0.3, 0.2, 0.7]))
    cases["clip"] = weighted(lambda: nc.clip(cl, -0.5, 0.5), cl)
    s = T(3, 4)
    cases["sum"] = weighted(lambda: nc.tsum(s, axis=0), s)
    mn = T(3, 4)
    cases["mean"] = weighted(lambda: nc.mean(mn, axis=1), mn)
    sm = T(3, 5)
    cases["softmax"] = weighted(lambda: nc.softmax(sm), sm)
    x, gn, bi = T(2, 4, 6), T(6), T(6)
    cases["layer_norm"] = weighted(lambda: nc.layer_norm(x, gn, bi), x, gn, bi)
    for pad in ["same", "causal"]:
        cx, ck = T(7, 3), T(3, 3)
        cases[f"depthwise_conv1d {pad}"] = weighted(lambda cx=cx, ck=ck, pad=pad: nc.depthwise_conv1d(cx, ck, pad),
                                                    cx, ck)
    dx = T(4, 5)
    cases["dropout"] = weighted(lambda: nc.dropout(dx, 0.3, np.random.default_rng(5), True), dx)
    mf = T(3, 4)
    mask = rng.random((3, 4)) > 0.5
    cases["masked_fill"] = weighted(lambda: nc.masked_fill(mf, mask, 0.0), mf)
    ix = T(5, 3)
    cases["index"] = weighted(lambda: nc.index(ix, (slice(None), [2, 0, 0])), ix)
    s1, s2 = T(2, 3), T(2, 3)
    cases["stack"] = weighted(lambda: nc.stack([s1, s2], axis=1), s1, s2)
    c1, c2 = T(2, 3), T(2, 2)
    cases["concat"] = weighted(lambda: nc.concat([c1, c2], axis=-1), c1, c2)
    sl = T(3, 6)
    cases["slice_last"] = weighted(lambda: nc.slice_last(sl, 1, 4), sl)
    fl = T(4, 3)
    cases["flip"] = weighted(lambda: nc.flip(fl, 0), fl)
    rs = T(2, 6)
    cases["reshape"] = weighted(lambda: nc.reshape(rs, (3, 4)), rs)

    Tn, di, ds = 9, 3, 4
    u, dl, A = T(Tn, di), T(Tn, di, pos=True), nc.Tensor(-rng.uniform(0.2, 1.5, (di, ds)))
    B, C, D = T(Tn, ds), T(Tn, ds), T(di)
    cases["selective_scan"] = weighted(lambda: selective_scan(u, dl, A, B, C, D), u, dl, A, B, C, D)
    cases["selective_scan_chunked"] = weighted(lambda: selective_scan_chunked(u, dl, A, B, C, D, chunk=4),
                                               u, dl, A, B, C, D)

    mcfg = MambaConfig(d_model=4, d_state=3, expand=2, d_conv=3)
    mp = init_mamba(mcfg, rng)
    mx = T(6, 4)
    cases["mamba_forward"] = weighted(lambda: mamba_forward(mx, mp), mx, *[t for _, t in named_parameters(mp)])
    bp = init_ext_bimamba(mcfg, rng)
    bx = T(6, 4)
    cases["ext_bimamba_forward"] = weighted(lambda: ext_bimamba_forward(bx, bp), bx,
                                            *[t for _, t in named_parameters(bp)])

    lcfg = ModelConfig(feature_dim=3, d_model=6, n_layers=1, n_speakers=2, kernels=(3, 3, 5), change_hidden=4,
                       lfa_mask=(1,), d_state=2, dropout=0.0)
    layer = init_layer(lcfg, rng)
    lx = T(7, 6)
    cases["feed_forward"] = weighted(lambda: feed_forward(lx, layer.ffn1, Mode()), lx,
                                     *[t for _, t in named_parameters(layer.ffn1)])
    cases["conv_module"] = weighted(lambda: conv_module(lx, layer.conv, Mode()), lx,
                                    *[t for _, t in named_parameters(layer.conv)])
    cases["conbimamba_layer_forward"] = weighted(lambda: conbimamba_layer_forward(lx, layer), lx,
                                                 *[t for _, t in named_parameters(layer)])

    acfg = replace(lcfg, n_layers=3, lfa_mask=(0, 1, 1))
    am = init_model(acfg, 3)
    am.lfa.alpha.data[:] = rng.standard_normal(3)
    outs = [T(5, 6) for _ in range(3)]
    cases["lfa_aggregate"] = weighted(lambda: lfa_aggregate(outs, am.lfa), *outs,
                                      *[t for _, t in named_parameters(am.lfa)])
    h, w, hb = T(5, 6), T(6, 2), T(2)
    cases["diar_head"] = weighted(lambda: diar_head(h, w, hb), h, w, hb)
    cases["change_head"] = weighted(lambda: change_head(h, am.change), h,
                                    *[t for _, t in named_parameters(am.change)])

    o, cl_ = T(2, 7), (rng.random((2, 7)) > 0.5).astype(float)
    cases["bet_loss"] = (lambda: bet_loss(o, cl_, 0.3, 2.0), [o])
    logits, y = T(2, 6, 3), (rng.random((2, 6, 3)) > 0.5).astype(float)
    cases["pit_bce_loss"] = (lambda: pit_bce_loss(nc.sigmoid(logits), y)[0], [logits])
    tl, to = T(2, 7, 2), T(2, 7)
    ty = (rng.random((2, 7, 2)) > 0.5).astype(float)
    cases["total_loss"] = (lambda: total_loss(nc.sigmoid(tl), ty, to, 0.5)[0], [tl, to])
    return cases


def test_criterion_2_gradient_suite():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errors = {name: fd_check(build, params, rng) for name, (build, params) in grad_cases(rng).items()}

    cfg = ModelConfig(feature_dim=5, d_model=16, n_layers=2, n_speakers=2, kernels=(3, 5, 7), change_hidden=8,
                      lfa_mask=(1, 1), d_state=4, dropout=0.0)
    model = init_model(cfg, 11)
    model.lfa.alpha.data[:] = [0.4, -0.3]
    x = rng.uniform(-1, 1, (2, 8, 5))
    y = np.zeros((2, 8, 2))
    y[0, 1:5, 0] = 1
    y[0, 4:, 1] = 1
    y[1, :3, 1] = 1

    def full():
        p, o = model_forward(nc.Tensor(x), model)
        return total_loss(p, y, o, 0.5)[0]

    errors["full tiny model"] = fd_check(full, [t for _, t in named_parameters(model)], rng, max_coords=12)
    elapsed = time.perf_counter() - t0
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    report(2, worst <= 1e-3 and elapsed < 60.0,
           f"{len(errors)} checks, worst rel. error {worst:.1e} ({name}) <= 1e-3, {elapsed:.1f} s < 60 s")


# --------------------------------------------------------------------------
# 3. loss closed forms


def test_criterion_3_loss_closed_forms():
    single = bet_loss(np.array([0.0]), np.array([1.0]), alpha=0.1, gamma=2.0).item()
    rng = np.random.default_rng(3)
    o = rng.standard_normal((3, 11))
    c = (rng.random((3, 11)) > 0.6).astype(float)
    p = 1 / (1 + np.exp(-o))
    bce = float(np.mean(-(c * np.log(p) + (1 - c) * np.log(1 - p))))
    reduction = abs(bet_loss(o, c, 1.0, 0.0).item() - bce)
    probs = rng.uniform(0.05, 0.95, (2, 9, 4))
    y = (rng.random((2, 9, 4)) > 0.6).astype(float)
    logits = rng.standard_normal((2, 9))
    total, st = total_loss(probs, y, logits)
    composed = pit_bce_loss(probs, y)[0].item() + 0.5 * bet_loss(logits[:, :-1], derive_change_labels(y),
                                                                st["alpha"], 2.0).item()
    composition = abs(total.item() - composed)
    report(3, abs(single - 0.0173287) <= 1e-6 and reduction <= 1e-12 and composition <= 1e-12,
           f"single {single:.7f} vs 0.0173287, BCE reduction {reduction:.1e}, composition {composition:.1e}")


# --------------------------------------------------------------------------
# 4. PIT invariance


def test_criterion_4_pit_invariance():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.01, 0.99, (3, 20, 4))
    y = (rng.random((3, 20, 4)) > 0.5).astype(float)
    base = pit_bce_loss(p, y)[0].item()
    spread = max(abs(pit_bce_loss(p, y[..., list(pi)])[0].item() - base)
                 for pi in itertools.permutations(range(4)))
    mismatches = 0
    for _ in range(200):
        p2 = rng.uniform(0.01, 0.99, (1, 10, 2))
        y2 = (rng.random((1, 10, 2)) > 0.5).astype(float)

        def bce(q, t):
            return float(np.mean(-(t * np.log(q) + (1 - t) * np.log(1 - q))))

        brute = min(bce(p2[0], y2[0]), bce(p2[0], y2[0][:, ::-1]))
        mismatches += pit_bce_loss(p2, y2)[0].item() != brute
    report(4, spread <= 1e-12 and mismatches == 0,
           f"24-permutation spread {spread:.1e} <= 1e-12, brute-force mismatches {mismatches}/200")


# --------------------------------------------------------------------------
# 5. LFA masking


def test_criterion_5_lfa_masking():
    rng = np.random.default_rng(5)
    cfg = ModelConfig(feature_dim=4, d_model=8, n_layers=7, n_speakers=2, kernels=(3, 5, 7), change_hidden=4,
                      d_state=2, dropout=0.0, lfa_mask=(0, 0, 0, 0, 1, 1, 1))
    model = init_model(cfg, 5)
    x = nc.Tensor(rng.standard_normal((12, 4)))
    p0, o0 = model_forward(x, model)
    identical = True
    for _ in range(5):
        model.lfa.alpha.data[:4] += rng.standard_normal(4) * 10
        p1, o1 = model_forward(x, model)
        identical &= np.array_equal(p0.data, p1.data) and np.array_equal(o0.data, o1.data)
    sum_err = 0.0
    for _ in range(100):
        model.lfa.alpha.data[:] = rng.standard_normal(7) * 5
        w = lfa_weights(model.lfa).data
        sum_err = max(sum_err, abs(w.sum() - 1.0))
        identical &= bool(np.all(w[:4] == 0.0))
    mismatches = 0
    for _ in range(1000):
        B, T, K = rng.integers(1, 3), rng.integers(2, 15), rng.integers(1, 5)
        y = (rng.random((B, T, K)) > 0.5).astype(float)
        brute = np.array([[float(any(y[b, t + 1, k] != y[b, t, k] for k in range(K))) for t in range(T - 1)]
                          for b in range(B)])
        mismatches += not np.array_equal(derive_change_labels(y), brute)
    report(5, identical and sum_err <= 1e-12 and mismatches == 0,
           f"masked-alpha outputs bit-identical: {identical}, |sum w - 1| {sum_err:.1e}, "
           f"change-label mismatches {mismatches}/1000")


# --------------------------------------------------------------------------
# 6. DER scorer


def brute_der(ref: Annotation, hyp: Annotation) -> float:
    horizon = int(max(s.end for s in ref.segments + hyp.segments))
    rs, hs = ref.speakers, hyp.speakers

    def grid(a, spks):
        return np.array([[any(s.speaker == k and s.start <= t < s.end for s in a.segments) for k in spks]
                         for t in range(horizon)], dtype=int).reshape(horizon, len(spks))

    R, H = grid(ref, rs), grid(hyp, hs)
    nr, nh = R.sum(1), H.sum(1)
    best = None
    for perm in itertools.permutations(range(max(len(rs), len(hs))), len(rs)):
        correct = sum(int((R[:, i] & H[:, j]).sum()) for i, j in enumerate(perm) if j < len(hs))
        err = np.maximum(nr - nh, 0).sum() + np.maximum(nh - nr, 0).sum() + np.minimum(nr, nh).sum() - correct
        best = err if best is None else min(best, err)
    return float(best) / float(R.sum())


def random_annotation(rng, prefix):
    a = Annotation("r")
    for _ in range(rng.integers(1, 7)):
        s = int(rng.integers(0, 11))
        a.add(f"{prefix}{rng.integers(3)}", s, int(rng.integers(s + 1, 13)))
    return a


def test_criterion_6_der_scorer():
    rng = np.random.default_rng(6)
    mismatches, decomposition, self_der = 0, 0.0, 0.0
    for _ in range(200):
        ref, hyp = random_annotation(rng, "r"), random_annotation(rng, "h")
        rep = der(ref, hyp)
        mismatches += rep.der != brute_der(ref.normalized(), hyp.normalized())
        decomposition = max(decomposition, abs(rep.miss + rep.false_alarm + rep.confusion - rep.der))
        self_der = max(self_der, der(ref, ref).der)
    report(6, mismatches == 0 and self_der == 0.0 and decomposition <= 1e-9,
           f"brute-force mismatches {mismatches}/200, der(x,x) {self_der}, decomposition {decomposition:.1e}")


# --------------------------------------------------------------------------
# 7 and 8. desk-scale end-to-end runs

E2E_SEED = 0
E2E_MODEL = ModelConfig(feature_dim=64, d_model=32, n_layers=7, n_speakers=4, kernels=(15, 31, 63),
                        change_hidden=32, d_state=16, dropout=0.1, lfa_mask=(0, 0, 0, 0, 1, 1, 1))
# ten epochs keep both criterion 7 trainings inside its 30 minute budget on one core
E2E_TRAIN = TrainConfig(epochs=10, batch_size=4, warmup_epochs=1, peak_lr=1e-3, augment_rotation=True)
E2E_GRID = TuningGrid(binarize=(0.4, 0.5, 0.6), cluster_threshold=(0.3, 0.5, 0.7, 0.9), min_cluster_size=(1, 2))
LAST_ONE = (0, 0, 0, 0, 0, 0, 1)


def e2e_run(model=E2E_MODEL, lambda_w=E2E_TRAIN.lambda_w) -> RunConfig:
    return RunConfig(seed=E2E_SEED, model=model, train=replace(E2E_TRAIN, lambda_w=lambda_w), grid=E2E_GRID,
                     synth=SynthConfig(num_speakers=4, feature_dim=64),
                     corpus=CorpusConfig(train_seconds=7200.0, dev_seconds=1200.0, test_seconds=1200.0))


class E2E:
    """Corpus plus one trained, tuned and scored system per variant, built on first use."""

    def __init__(self, root: Path):
        self.root = root
        self.t0 = time.perf_counter()
        run = e2e_run()
        self.splits = {s: synthesize_split(run.synth, s, getattr(run.corpus, f"{s}_seconds"), run.seed)
                       for s in ("train", "dev", "test")}
        K, chunk = run.model.n_speakers, run.train.chunk_seconds
        self.train_segs = make_segments(self.splits["train"], chunk, K)
        self.dev_segs = make_segments(self.splits["dev"], chunk, K)
        self.systems: dict[str, dict] = {}

    def system(self, name: str, run: RunConfig) -> dict:
        if name not in self.systems:
            res = train(run, self.root / name, self.train_segs, self.dev_segs)
            tuned = tune_hyperparams(self.splits["dev"], res.model, run.grid, PipelineConfig())
            cfg = PipelineConfig(binarize_threshold=tuned.binarize_threshold, cluster=tuned.cluster)
            rep, hyps, _ = evaluate(self.splits["test"], res.model, cfg)
            bnd = aggregate([boundary_der(r.reference, h, 0.25) for r, h in zip(self.splits["test"], hyps)])
            self.systems[name] = {"der": rep.der, "boundary": bnd.der, "epochs": len(res.metrics),
                                  "elapsed": time.perf_counter() - self.t0}
            (self.root / name / "config.json").write_text(emit(run))
        return self.systems[name]


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    return E2E(tmp_path_factory.mktemp("e2e"))


def test_criterion_7_end_to_end(e2e):
    full = e2e.system("full", e2e_run())
    ablated = e2e.system("no_bet", e2e_run(lambda_w=0.0))
    elapsed = ablated["elapsed"]
    gap = ablated["boundary"] - full["boundary"]
    ok = full["der"] <= 0.15 and gap >= 0.01 and elapsed <= 1800 and full["epochs"] <= 30
    report(7, ok, f"test DER {100 * full['der']:.2f}% <= 15%, boundary DER {100 * full['boundary']:.2f}% vs "
                  f"{100 * ablated['boundary']:.2f}% without BET (gap {100 * gap:.2f} >= 1 point), "
                  f"{full['epochs']} epochs, {elapsed / 60:.1f} min <= 30 min")


def test_criterion_8_lfa_direction(e2e):
    last3 = e2e.system("full", e2e_run())
    last1 = e2e.system("last1", e2e_run(model=replace(E2E_MODEL, lfa_mask=LAST_ONE)))
    ok = last3["der"] <= last1["der"] + 0.003
    report(8, ok, f"last-3 DER {100 * last3['der']:.2f}% vs last-1 {100 * last1['der']:.2f}% (tie margin 0.3)")


# --------------------------------------------------------------------------
# 9. reproducibility


def test_criterion_9_reproducibility(tmp_path):
    run = RunConfig(
        seed=9,
        model=ModelConfig(feature_dim=8, d_model=8, n_layers=3, n_speakers=2, kernels=(3, 5, 7), change_hidden=4,
                          d_state=2, dropout=0.1, lfa_mask=(0, 1, 1)),
        train=TrainConfig(epochs=2, batch_size=2, warmup_epochs=1, peak_lr=1e-3, average_last=2,
                          augment_rotation=True),
        grid=TuningGrid(binarize=(0.4, 0.5), cluster_threshold=(0.5, 1.0), min_cluster_size=(1,)),
        synth=SynthConfig(num_speakers=2, feature_dim=8, duration_seconds=30.0),
        corpus=CorpusConfig(train_seconds=60.0, dev_seconds=30.0, test_seconds=30.0),
    )
    cfg = tmp_path / "run.json"
    cfg.write_text(emit(run))

    def pipeline(out: Path):
        data, ck = out / "data", out / "run" / "final.ckpt"
        codes = [
            cli_main(["synth", "--config", str(cfg), "--out", str(data)]),
            cli_main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out / "run")]),
            cli_main(["tune", "--config", str(cfg), "--data", str(data), "--checkpoint", str(ck),
                      "--out", str(out / "tune")]),
            cli_main(["infer", "--config", str(out / "tune" / "tuned_config.json"), "--data", str(data),
                      "--checkpoint", str(ck), "--out", str(out / "infer")]),
        ]
        assert codes == [0, 0, 0, 0]
        return (out / "infer" / "hyp.rttm").read_bytes(), (out / "run" / "metrics.jsonl").read_bytes()

    rttm_a, log_a = pipeline(tmp_path / "a")
    rttm_b, log_b = pipeline(tmp_path / "b")
    report(9, rttm_a == rttm_b and log_a == log_b and len(rttm_a) > 0,
           f"RTTM identical: {rttm_a == rttm_b}, metrics identical: {log_a == log_b}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
