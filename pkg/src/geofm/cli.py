"""Command-line entry point.

Exit status: 0 success, 1 runtime failure, 2 bad arguments, 3 invalid config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import APM_ABLATION, CONFIG_SCHEMA, ConfigError, PretrainConfig, apply_preset, load_config
from .datakit import DatasetSpec, generate_dataset, make_views, read_dataset, write_dataset
from .errors import FileFormatError
from .evaluation import (
    FEATURE_LEVELS, dataset_hash, dump_query_attention, export_features_csv, extract_features, knn_eval,
    query_attention,
)
from .model import PretrainModel
from .trainer import Pretrainer

log = logging.getLogger("geofm")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _global_flags(p, default) -> None:
    p.add_argument("--config", type=Path, default=default, help="JSON config document (see `geofm schema`)")
    p.add_argument("--seed", type=int, default=default, help="overrides every seed in the config")
    p.add_argument("--out", type=Path, default=default, help="output path (file or directory, per command)")
    p.add_argument("--quiet", action="store_true", default=default or False,
                   help="suppress logs; reports still go to stdout")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geofm", description="multi-modal geospatial backbone: data, pre-training, evaluation")
    _global_flags(p, None)
    # the same flags are accepted after the subcommand too; SUPPRESS keeps an
    # absent flag from clobbering one given before it
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic geo-aligned dataset")
    g.add_argument("--count", type=_positive, required=True)
    g.add_argument("--classes", type=_positive)
    g.add_argument("--start", type=int, default=0, help="index of the first sample (for held-out splits)")

    t = sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training")
    t.add_argument("--data", type=Path, help="dataset file (default: generate from the config)")
    t.add_argument("--iters", type=_positive)
    t.add_argument("--batch-size", type=_positive)
    t.add_argument("--preset", help=f"apm-ablation:{{{','.join(APM_ABLATION)}}}")
    t.add_argument("--metrics", type=Path, help="JSON-lines metrics log")
    t.add_argument("--init-only", action="store_true", help="write the random-init checkpoint and stop")

    e = sub.add_parser("eval-knn", parents=[common], help="k-NN accuracy of frozen image-level features")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--train-data", type=Path, required=True)
    e.add_argument("--test-data", type=Path, required=True)
    e.add_argument("--k", type=_positive, default=20)
    e.add_argument("--branch", choices=("teacher", "student"), default="teacher")
    e.add_argument("--level", choices=FEATURE_LEVELS, default="fused")

    d = sub.add_parser("dump-attn", parents=[common], help="per-query attention maps for the views of one sample")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--branch", choices=("teacher", "student"), default="teacher")

    x = sub.add_parser("export-features", parents=[common], help="CSV of image-level features (id,label,f0..)")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--branch", choices=("teacher", "student"), default="teacher")
    x.add_argument("--level", choices=FEATURE_LEVELS, default="fused")

    sub.add_parser("schema", parents=[common], help="print the config JSON schema")
    return p


def _config(args) -> PretrainConfig:
    if args.config is None:
        cfg = PretrainConfig()
    else:
        try:
            data = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        cfg = load_config(data)
    if args.seed is not None:
        cfg.model.seed = cfg.train.seed = args.seed
        cfg.data = DatasetSpec(**{**cfg.data.__dict__, "seed": args.seed})
    return cfg


def _require_out(args, what: str) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} needs --out ({what})")
    return args.out


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args, cfg):
    out = _require_out(args, "dataset file")
    fields = dict(cfg.data.__dict__, count=args.start + args.count)
    if args.classes:
        fields["n_classes"] = args.classes
    spec = DatasetSpec(**fields)
    samples = generate_dataset(spec)[args.start:]
    write_dataset(samples, out)
    _emit({"command": "gen-data", "path": str(out), "count": len(samples), "dataset_hash": dataset_hash(samples)})


def cmd_pretrain(args, cfg):
    out = _require_out(args, "checkpoint file")
    if args.preset:
        try:
            apply_preset(cfg, args.preset)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.iters:
        cfg.train.total_iters = args.iters
    if args.batch_size:
        cfg.train.batch_size = args.batch_size
    model = PretrainModel(cfg.model)
    history = []
    if not args.init_only:
        samples = read_dataset(args.data) if args.data else generate_dataset(cfg.data)
        if args.metrics and args.metrics.exists():
            args.metrics.unlink()
        trainer = Pretrainer(cfg, model)
        history = trainer.fit(samples, metrics_path=args.metrics)
    save_checkpoint(model, out, extra={"iters": len(history)})
    report = {"command": "pretrain", "checkpoint": str(out), "iters": len(history),
              "apm_merge": cfg.model.backbone.apm_merge}
    if history:
        report["final_loss"] = history[-1]["loss"]
    _emit(report)


def cmd_eval_knn(args, cfg):
    model = load_checkpoint(args.checkpoint)
    train, test = read_dataset(args.train_data), read_dataset(args.test_data)
    a, ya = extract_features(model, train, args.branch, args.level)
    b, yb = extract_features(model, test, args.branch, args.level)
    report = knn_eval(a, ya, b, yb, k=args.k, source=f"{args.level}/{args.branch}",
                      dataset_hash=dataset_hash(train + test))
    _emit(report.to_dict())


def cmd_dump_attn(args, cfg):
    out = _require_out(args, "output directory")
    model = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} out of range for {len(samples)} samples")
    sample = samples[args.index]
    viewset = make_views(sample, cfg.aug, np.random.default_rng([cfg.train.seed, args.index]))
    maps = query_attention(model, viewset, args.branch, model.regions([sample])[0])
    written = dump_query_attention(maps, out)
    _emit({"command": "dump-attn", "dir": str(out), "views": len(maps),
           "queries": int(maps[0].shape[0]), "files": len(written)})


def cmd_export_features(args, cfg):
    out = _require_out(args, "CSV file")
    model = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    feats, labels = extract_features(model, samples, args.branch, args.level)
    export_features_csv(feats, labels, out)
    _emit({"command": "export-features", "path": str(out), "rows": len(feats), "dim": int(feats.shape[1])})


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "eval-knn": cmd_eval_knn,
            "dump-attn": cmd_dump_attn, "export-features": cmd_export_features}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "schema":
        _emit(CONFIG_SCHEMA)
        return 0
    try:
        cfg = _config(args)
        torch.manual_seed(cfg.train.seed)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"geofm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"geofm: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"geofm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
