"""Command-line entry point: one executable, one subcommand per stage."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import CsvqaError
from .gcn import TrainConfig
from .retrieval import TypeRatios

STAGES = {
    "retrieve": pipeline.stage_retrieve,
    "filter": pipeline.stage_filter,
    "score": pipeline.stage_score,
    "prompt": pipeline.stage_prompt,
    "infer": pipeline.stage_infer,
    "eval": pipeline.stage_eval,
}


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--k", type=int, default=None, help="triplets kept per source")
    parser.add_argument("--big-k", type=int, default=None, dest="big_k",
                        help="candidates retrieved per source before filtering")
    parser.add_argument("--tau", type=float, default=None, help="similarity floor")
    parser.add_argument("--metric", choices=["cosine", "manhattan", "euclidean"], default=None)
    parser.add_argument("--ratios", default=None,
                        help="preset name or comma-separated pe,ec,si proportions")
    parser.add_argument("--combine", choices=["max", "mean"], default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default=None, dest="out_dir")


def _config_from_args(args: argparse.Namespace) -> pipeline.RunConfig:
    overrides = {
        name: getattr(args, name)
        for name in ("k", "big_k", "tau", "metric", "combine", "seed", "out_dir")
        if getattr(args, name, None) is not None
    }
    if getattr(args, "ratios", None) is not None:
        ratios = args.ratios
        if "," in ratios:
            parts = [float(p) for p in ratios.split(",")]
            if len(parts) != 3:
                raise CsvqaError("--ratios expects three comma-separated proportions")
            TypeRatios(*parts)  # validate early
            overrides["ratios"] = parts
        else:
            overrides["ratios"] = ratios
    return pipeline.RunConfig.from_file(args.config, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csvqa",
        description="Commonsense-grounded VQA pipeline: retrieve, filter, score, prompt, infer, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="parse a KG file and materialize its embeddings")
    p.add_argument("--kg", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--store", help="embedding store file (store-only mode)")
    source.add_argument("--service", help="embedding service URL")

    for name in STAGES:
        p = sub.add_parser(name, help=f"run only the {name} stage")
        _add_config_arguments(p)

    p = sub.add_parser("run", help="run every stage end to end")
    _add_config_arguments(p)

    p = sub.add_parser("train-gcn", help="train the confidence network")
    _add_config_arguments(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.4)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "build-index":
            manifest = pipeline.cmd_build_index(
                Path(args.kg),
                Path(args.out_dir),
                store_path=Path(args.store) if args.store else None,
                service_url=args.service,
            )
            print(json.dumps(manifest, indent=2, sort_keys=True))
        elif args.command == "run":
            cfg = _config_from_args(args)
            manifest = pipeline.cmd_run(cfg)
            print(json.dumps(manifest, indent=2, sort_keys=True))
        elif args.command == "train-gcn":
            cfg = _config_from_args(args)
            train_cfg = TrainConfig(
                batch_size=args.batch_size,
                learning_rate=args.lr,
                max_epochs=args.epochs,
                patience=args.patience,
                seed=cfg.seed,
            )
            path = pipeline.cmd_train_gcn(cfg, train_cfg, dropout_rate=args.dropout)
            print(str(path))
        else:
            cfg = _config_from_args(args)
            cfg.validate()
            result = STAGES[args.command](cfg)
            print(
                json.dumps(
                    {
                        "stage": result.name,
                        "artifact": str(result.artifact),
                        "cached": result.cached,
                        "counts": result.counts,
                    },
                    indent=2,
                    sort_keys=True,
                )
            )
    except CsvqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
