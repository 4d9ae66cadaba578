"""Command-line entry point: ``cear <subcommand> --config run.cfg [--set key=value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, format_config, load_config
from .stage1 import TrainingDivergedError
from .synthetic import SyntheticSpec, write_synthetic

logger = logging.getLogger("cear")

# Hyperparameters for the synthetic fixture; tuned for a CPU run of a few minutes.
SYNTHETIC_OVERRIDES = {
    "stage1_kind": "complex",
    "stage1_dim": 2,
    "stage1_epochs": 100,
    "stage1_lr": 0.01,
    "stage1_negatives": 32,
    "encoder_hidden": 64,
    "encoder_layers": 2,
    "encoder_heads": 4,
    "encoder_ff": 128,
    "pretrain_epochs": 20,
    "pretrain_lr": 1e-3,
    "stage2_k": 40,
    "stage2_epochs": 8,
    "stage2_lr": 1e-3,
    "stage2_max_train_queries": 4000,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--workdir", help="artifact directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cear", description="Two-stage KB completion with a cross-entity reranker")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write the synthetic benchmark KB and a matching config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-entities", type=int, default=500)
    p.add_argument("--num-relations", type=int, default=20)
    p.add_argument("--num-facts", type=int, default=6000)

    p = sub.add_parser("train-stage1", help="train the embedding model")
    _common(p)

    p = sub.add_parser("candidates", help="write top-k Stage-1 candidates for a split")
    _common(p)
    p.add_argument("--split", choices=["train", "valid", "test"], required=True)
    p.add_argument("--k", type=int)

    p = sub.add_parser("pretrain-lm", help="build the vocabulary and masked-LM pretrain the encoder")
    _common(p)

    p = sub.add_parser("train-stage2", help="train the reranker")
    _common(p)
    p.add_argument("--ablation", choices=["none", "random-init", "independent", "shuffle"])
    p.add_argument("--shuffle-seed", type=int)

    p = sub.add_parser("eval", help="evaluate stage1 or cear on a split")
    _common(p)
    p.add_argument("--system", choices=["stage1", "cear"], required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--ablation", choices=["none", "random-init", "independent", "shuffle"])
    p.add_argument("--shuffle-seed", type=int)

    p = sub.add_parser("sweep-k", help="train and evaluate one reranker per k")
    _common(p)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--ks", help="comma-separated k values (default from config)")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    if getattr(args, "workdir", None):
        out["workdir"] = args.workdir
    if getattr(args, "ablation", None):
        out["stage2_ablation"] = args.ablation
    if getattr(args, "shuffle_seed", None) is not None:
        out["stage2_shuffle_seed"] = str(args.shuffle_seed)
    if getattr(args, "ks", None):
        out["sweep_ks"] = args.ks
    return out


def make_synthetic_cmd(args) -> None:
    spec = SyntheticSpec(num_entities=args.num_entities, num_relations=args.num_relations,
                         num_facts=args.num_facts, seed=args.seed)
    kb = write_synthetic(args.out, spec)
    cfg = RunConfig(workdir="run", train_path="train.txt", valid_path="valid.txt", test_path="test.txt",
                    entity_names="entity_names.txt", relation_names="relation_names.txt",
                    **SYNTHETIC_OVERRIDES)
    with open(os.path.join(args.out, "synthetic.cfg"), "w", encoding="utf-8", newline="\n") as f:
        f.write("# synthetic benchmark; paths are relative to this file\n")
        f.write(format_config(cfg))
    print(kb.format_summary("synthetic"))


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "make-synthetic":
            make_synthetic_cmd(args)
            return 0
        cfg = load_config(args.config, _overrides(args))
        kb = pipeline.load_dataset(cfg)
        os.makedirs(cfg.workdir, exist_ok=True)
        if args.command == "train-stage1":
            print(kb.format_summary())
            pipeline.run_train_stage1(cfg, kb)
        elif args.command == "candidates":
            sets = pipeline.run_candidates(cfg, args.split, kb, args.k)
            print(f"wrote {len(sets)} candidate sets to {pipeline.candidates_path(cfg, args.split)}")
        elif args.command == "pretrain-lm":
            pipeline.run_pretrain(cfg, kb)
        elif args.command == "train-stage2":
            pipeline.run_train_stage2(cfg, kb)
        elif args.command == "eval":
            report = pipeline.evaluate(cfg, args.system, args.split, kb)
            print(pipeline.format_report(report))
        elif args.command == "sweep-k":
            pipeline.run_sweep(cfg, args.split, kb)
    except ConfigError as exc:
        print(f"cear: configuration error: {exc}", file=sys.stderr)
        return 2
    except (pipeline.MissingArtifactError, CheckpointError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"cear: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
