"""Command-line entry points.

``conbimamba <command> [--config PATH] [--seed N] [--out DIR] ...``

Commands: ``synth``, ``train``, ``infer``, ``tune``, ``score``,
``avg-checkpoints``. Exit status is 0 on success, 2 for configuration
errors and 3 for data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError
from .dataset import DatasetError, load_split, synthesize_split, write_corpus
from .features import FeatureFileError, read_embedding_table, read_features
from .numcore import ConfigError, ShapeError
from .pipeline import ClusterConfig, DevRecording, EmbeddingError, TableEmbedder, diarize, tune_hyperparams
from .scoring import TABLE_HEADER, RttmError, UndefinedDerError, aggregate, der, parse_rttm, write_rttm
from .train import average_checkpoints, model_from_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

logger = logging.getLogger("conbimamba")


class DataError(Exception):
    pass


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.paths.data = args.data
    cfg.validate()
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args, cfg) -> str:
    path = args.checkpoint or cfg.paths.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or paths.checkpoint)")
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    return path


def _embedder(cfg):
    return TableEmbedder(read_embedding_table(cfg.paths.embeddings)) if cfg.paths.embeddings else None


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    splits = {
        "train": synthesize_split(cfg.synth, "train", cfg.corpus.train_seconds, cfg.seed),
        "dev": synthesize_split(cfg.synth, "dev", cfg.corpus.dev_seconds, cfg.seed),
        "test": synthesize_split(cfg.synth, "test", cfg.corpus.test_seconds, cfg.seed),
    }
    write_corpus(out, splits)
    (out / "config.json").write_text(config_mod.emit(cfg))
    print(f"wrote {sum(len(v) for v in splits.values())} recordings to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not (Path(cfg.paths.data) / "manifest.json").exists():
        raise DataError(f"dataset {cfg.paths.data} has no manifest.json")
    out = _out(args)
    (out / "config.json").write_text(config_mod.emit(cfg))
    res = train(cfg, out)
    print(f"trained {len(res.metrics)} epochs; final checkpoint {res.final_checkpoint}")
    return EXIT_OK


def _recordings(args, cfg) -> list[DevRecording]:
    if args.features:
        recs = []
        for f in args.features:
            feats, fr = read_features(f)
            recs.append(DevRecording(Path(f).stem, feats, fr, None))
        return recs
    return load_split(cfg.paths.data, args.split)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    model = model_from_checkpoint(_checkpoint(args, cfg))
    embedder = _embedder(cfg)
    hyps = [diarize(r.features, r.frame_rate, model, cfg.pipeline, r.recording_id, embedder)
            for r in _recordings(args, cfg)]
    out = _out(args)
    (out / "hyp.rttm").write_text(write_rttm(hyps))
    print(f"wrote {out / 'hyp.rttm'} ({sum(len(h.segments) for h in hyps)} segments)")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _load_config(args)
    model = model_from_checkpoint(_checkpoint(args, cfg))
    dev = load_split(cfg.paths.data, args.split)
    res = tune_hyperparams(dev, model, cfg.grid, cfg.pipeline, _embedder(cfg))
    out = _out(args)
    tuned = replace(cfg, pipeline=replace(cfg.pipeline, binarize_threshold=res.binarize_threshold,
                                          cluster=ClusterConfig(**vars(res.cluster))))
    (out / "tuned_config.json").write_text(config_mod.emit(tuned))
    (out / "tuning.json").write_text(json.dumps({"best": {"binarize": res.binarize_threshold,
                                                          "threshold": res.cluster.threshold,
                                                          "min_cluster_size": res.cluster.min_cluster_size,
                                                          "der": res.der},
                                                 "table": res.table}, indent=1, sort_keys=True) + "\n")
    print(f"best dev DER {100 * res.der:.2f}% at binarize={res.binarize_threshold} "
          f"threshold={res.cluster.threshold} min_cluster_size={res.cluster.min_cluster_size}")
    return EXIT_OK


def score_files(ref_path, hyp_path, collar: float = 0.0) -> tuple[str, dict]:
    """Per-recording and pooled DER; returns the text table and the JSON-ready dict."""
    refs = {a.recording_id: a for a in parse_rttm(Path(ref_path).read_text())}
    hyps = {a.recording_id: a for a in parse_rttm(Path(hyp_path).read_text())}
    if not refs:
        raise DataError(f"{ref_path}: no reference segments")
    from .scoring import Annotation

    reports = {rid: der(ref, hyps.get(rid, Annotation(rid)), collar) for rid, ref in sorted(refs.items())}
    overall = aggregate(list(reports.values()))
    lines = [TABLE_HEADER] + [r.table_row(rid) for rid, r in reports.items()] + [overall.table_row("OVERALL")]
    data = {"collar": collar, "overall": overall.to_dict(),
            "recordings": {rid: r.to_dict() for rid, r in reports.items()}}
    return "\n".join(lines) + "\n", data


def cmd_score(args) -> int:
    table, data = score_files(args.ref, args.hyp, args.collar)
    print(table, end="")
    print(json.dumps(data, sort_keys=True))
    if args.out:
        out = _out(args)
        (out / "score.txt").write_text(table)
        (out / "score.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_avg(args) -> int:
    paths = [Path(p) for p in args.checkpoints]
    for p in paths:
        if not p.exists():
            raise DataError(f"checkpoint {p} does not exist")
    if args.last < 1:
        raise ConfigError("--last must be >= 1")
    chosen = paths[-args.last:]
    out = _out(args) / "averaged.ckpt"
    average_checkpoints(chosen, out)
    print(f"averaged {len(chosen)} checkpoints into {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conbimamba", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic corpus"))
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", help="corpus directory (overrides paths.data)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("infer", help="diarize recordings into RTTM"))
    p.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
    p.add_argument("--data", help="corpus directory (overrides paths.data)")
    p.add_argument("--split", default="test", help="corpus split to diarize (default: test)")
    p.add_argument("--features", nargs="+", help="feature files to diarize instead of a corpus split")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("tune", help="grid-search pipeline hyperparameters on a dev split"))
    p.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
    p.add_argument("--data", help="corpus directory (overrides paths.data)")
    p.add_argument("--split", default="dev", help="corpus split to tune on (default: dev)")
    p.set_defaults(func=cmd_tune)

    p = common(sub.add_parser("score", help="DER of a hypothesis RTTM against a reference RTTM"), out_required=False)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.set_defaults(func=cmd_score)

    p = common(sub.add_parser("avg-checkpoints", help="average the last n checkpoints"))
    p.add_argument("checkpoints", nargs="+", help="checkpoint files, oldest first")
    p.add_argument("-n", "--last", type=int, default=3, help="how many of the given checkpoints to average")
    p.set_defaults(func=cmd_avg)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, FeatureFileError, RttmError, CheckpointError, ShapeError, EmbeddingError,
            UndefinedDerError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
