"""Command-line entry point.

Verbs: gen-data, pretrain, finetune, evaluate, matrix, plot-data.
Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import harness
from .config import (DIRECTIONS, METHODS, ConfigError, ExperimentConfig, config_hash,
                     load_config)
from .diffcore import save_checkpoint
from .harness import DEFAULT_MATRIX_METHODS, DivergenceError
from .synthdata import save_jsonl

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

logger = logging.getLogger(__name__)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, metavar="N", help="override config seed")
    p.add_argument("--method", metavar="KEY", help="override config method")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory")
    p.add_argument("--direction", choices=DIRECTIONS, help="override config direction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relground",
                                     description="Synthetic-domain grounding transfer experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("gen-data", "pretrain", "finetune", "matrix", "plot-data"):
        p = sub.add_parser(verb)
        _add_common(p)
    p = sub.add_parser("evaluate")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate")
    p.add_argument("--split", default="target_val",
                   choices=("source_train", "source_val", "source_test",
                            "target_train", "target_val", "target_test"))
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.method is not None and "," not in args.method:
        cfg = replace(cfg, method=args.method)
    if args.direction is not None:
        cfg = replace(cfg, direction=args.direction)
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    data = harness.build_datasets(cfg)
    os.makedirs(args.out, exist_ok=True)
    src_path = os.path.join(args.out, "source.jsonl")
    tgt_path = os.path.join(args.out, "target.jsonl")
    full_source = data.source_train.with_samples(
        data.source_train.samples + data.source_val.samples + data.source_test.samples)
    full_target = data.target_train.with_samples(
        data.target_train.samples + data.target_val.samples + data.target_test.samples)
    save_jsonl(full_source, src_path)
    save_jsonl(full_target, tgt_path)
    print(f"wrote {src_path} ({len(full_source.samples)} samples) and "
          f"{tgt_path} ({len(full_target.samples)} samples)")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    if cfg.method not in METHODS:
        raise ConfigError(f"pretrain expects one of {METHODS}, got {cfg.method!r}")
    try:
        bundle, _data, result = harness.pretrain(cfg)
    except DivergenceError as exc:
        _save_diverged(exc, cfg, args.out)
        return EXIT_DIVERGED
    path = harness._ckpt_path(args.out, cfg, "pretrain")
    save_checkpoint(bundle.store, path, meta=harness.checkpoint_meta(cfg, bundle, "pretrain"))
    _write_result(result, args.out, f"pretrain_{cfg.method}_{cfg.direction}.json")
    print(f"pretrained {cfg.method} ({cfg.direction}); source val accuracy "
          f"{result.accuracies['source_val']:.4f}; checkpoint {path}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    if cfg.method not in METHODS:
        raise ConfigError(f"finetune expects one of {METHODS}, got {cfg.method!r}")
    ckpt = harness._ckpt_path(args.out, cfg, "pretrain")
    if not os.path.exists(ckpt):
        raise ConfigError(f"missing pretrain checkpoint {ckpt}; run pretrain first")
    data = harness.build_datasets(cfg)
    store, params, _meta = harness.params_from_checkpoint(ckpt, cfg)
    bundle = harness.ModelBundle(store=store, params=params)
    try:
        best_bundle, result = harness.finetune(bundle, cfg, data)
    except DivergenceError as exc:
        _save_diverged(exc, cfg, args.out)
        return EXIT_DIVERGED
    path = harness._ckpt_path(args.out, cfg, "best")
    save_checkpoint(best_bundle.store, path,
                    meta=harness.checkpoint_meta(cfg, best_bundle, "best"))
    _write_result(result, args.out, f"finetune_{cfg.method}_{cfg.direction}.json")
    print(f"finetuned {cfg.method} ({cfg.direction}); target val {result.accuracies['target_val']:.4f} "
          f"test {result.accuracies['target_test']:.4f} at lr multiplier {result.chosen_multiplier:g}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("evaluate requires --checkpoint")
    data = harness.build_datasets(cfg)
    _store, params, _meta = harness.params_from_checkpoint(args.checkpoint, cfg)
    ds = getattr(data, args.split)
    mode = "pretrain" if args.split.startswith("source") else "finetune"
    acc = harness.evaluate(params, ds, mode)
    print(f"{args.split} accuracy: {acc:.4f} ({len(ds.samples)} samples)")
    return EXIT_OK


def _cmd_matrix(args) -> int:
    cfg = resolve_config(args)
    methods = DEFAULT_MATRIX_METHODS
    if args.method:
        methods = tuple(m.strip() for m in args.method.split(",") if m.strip())
    directions = (cfg.direction,) if args.direction else DIRECTIONS
    results = harness.run_matrix(cfg, args.out, methods=methods, directions=directions)
    bad = [r for r in results if r.status != "ok"]
    print(f"matrix complete: {len(results)} runs, {len(bad)} failed; "
          f"results at {os.path.join(args.out, 'results.csv')} (config {config_hash(cfg)})")
    return EXIT_OK


def _cmd_plot_data(args) -> int:
    written = harness.write_plot_data(args.out)
    print(f"wrote {len(written)} curve files under {os.path.join(args.out, 'plotdata')}")
    return EXIT_OK


def _write_result(result, out_dir, name) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(result.to_json() + "\n")


def _save_diverged(exc: DivergenceError, cfg, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    path = os.path.join(out_dir, "checkpoints",
                        f"diverged_{cfg.method}_{cfg.direction}_it{exc.iteration}.ckpt")
    save_checkpoint(exc.last_good, path, meta={"diverged_at": exc.iteration})
    print(f"training diverged at iteration {exc.iteration}; last good checkpoint: {path}",
          file=sys.stderr)


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "matrix": _cmd_matrix,
    "plot-data": _cmd_plot_data,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
