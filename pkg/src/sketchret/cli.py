"""Command-line entry point for the full lifecycle.

Exit codes: 0 success, 2 usage, 3 data error, 4 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import generate_synthetic, load_dataset, save_dataset
from .errors import SketchretError
from .evaluation import evaluate_fold
from .index import build_index, knn, load_index, rerank, save_index
from .model import ModelConfig, RetrievalModel, checkpoint_fingerprint
from .training import TrainConfig, get_fold, train, write_loss_csv

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchret", description="Sketch-to-image retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--sketches", type=int, default=12)
    p.add_argument("--images", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a checkpoint on one fold")
    p.add_argument("--data", required=True)
    p.add_argument("--fold", choices=["S1", "S2", "S3", "S4"], default="S1")
    p.add_argument("--config", default=None, help="JSON file with 'model' and 'train' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("build-index", help="precompute retrieval tokens for a gallery")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("query", help="rank the index against one sketch")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--sketch", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rerank", type=int, default=0, metavar="M")
    p.add_argument("--data", default=None, help="dataset root, needed for --rerank")

    p = sub.add_parser("evaluate", help="mAP and Top-K on a fold's test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", choices=["S1", "S2", "S3", "S4"], default="S1")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="run the HTTP retrieval service")
    p.add_argument("--config", required=True)

    return parser


def _cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.classes, args.sketches, args.images, args.size, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} items ({len(ds.classes)} classes) to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    conf = _read_config(args.config)
    model_cfg = ModelConfig.from_dict(conf.get("model", {}))
    train_kwargs = dict(conf.get("train", {}))
    for key, val in (("seed", args.seed), ("epochs", args.epochs), ("max_steps", args.steps), ("lr", args.lr)):
        if val is not None:
            train_kwargs[key] = val
    train_kwargs["fold_id"] = args.fold
    cfg = TrainConfig(**train_kwargs)
    ds = load_dataset(args.data)
    fold = get_fold(ds.classes, args.fold)
    model = RetrievalModel.init(model_cfg, seed=cfg.seed)
    result = train(ds, fold, cfg, model, progress=True)
    model.save(args.out)
    if args.loss_csv:
        write_loss_csv(result.loss_curve, args.loss_csv)
    final = result.loss_curve[-1][1] if result.loss_curve else float("nan")
    print(f"trained {result.steps} steps, final loss {final:.4f}, checkpoint {args.out}")
    return EXIT_OK


def _cmd_build_index(args) -> int:
    model = RetrievalModel.load(args.ckpt)
    ds = load_dataset(args.data)
    idx, report = build_index(model, ds, fingerprint=checkpoint_fingerprint(args.ckpt))
    save_index(idx, args.out)
    print(f"indexed {report.built} images ({len(report.skipped)} skipped) -> {args.out}")
    return EXIT_OK


def _cmd_query(args) -> int:
    from . import tokenizer

    model = RetrievalModel.load(args.ckpt)
    idx = load_index(args.index)
    x = tokenizer.preprocess_sketch(Path(args.sketch), model.cfg.input_size)
    embedding = model.encode_sketch(x)
    rt = embedding.tokens.values[0]
    result = knn(idx, rt, args.k)
    if args.rerank:
        if args.data is None:
            raise SketchretError("--rerank requires --data for image access")
        ds = load_dataset(args.data)
        by_id = {i.id: i for i in ds.items}

        def loader(item_id):
            return by_id[item_id].load_raster()

        result = rerank(model, embedding, result, min(args.rerank, len(result.entries)), loader)
    print(f"{'rank':<5} {'distance':<12} {'mode':<5} {'label':<20} id")
    for rank, e in enumerate(result.entries, start=1):
        print(f"{rank:<5} {e.distance:<12.6f} {e.mode:<5} {e.label:<20} {e.id}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    model = RetrievalModel.load(args.ckpt)
    ds = load_dataset(args.data)
    fold = get_fold(ds.classes, args.fold)
    report = evaluate_fold(model, ds, fold, seed=args.seed)
    for group in ("seen", "unseen"):
        block = report[group]
        if block is None:
            print(f"{group}: no queries")
            continue
        tops = "  ".join(f"Top-{k}: {block[f'top{k}']:.4f}" for k in (10, 50, 100))
        print(f"{group}: mAP {block['mAP']:.4f}  {tops}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
        print(f"report written to {args.out}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    conf = _read_config(args.config).get("service", _read_config(args.config))
    serve(ServiceConfig(**conf))
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "build-index": _cmd_build_index,
    "query": _cmd_query,
    "evaluate": _cmd_evaluate,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0,) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except (SketchretError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # internal failure
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
