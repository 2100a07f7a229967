"""Command-line entry point: prepare, train, eval, params, export and synth."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from felrec.cache import CacheFormatError
from felrec.config import ConfigError, RunConfig, resolve
from felrec.evaluator import MODES, evaluate, popularity_curve
from felrec.model import FELRec
from felrec.numerics.optim import NonFiniteGradientError
from felrec.pipeline import (
    DataError,
    InteractionStream,
    PartitionLabel,
    Vocabulary,
    ingest,
    partition_test,
    read_prepared,
    split,
    write_canonical,
)
from felrec.trainer import CheckpointError, NonFiniteLossError, Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("felrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_FILES = ("train.tsv", "validation.tsv", "test.tsv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- prepared data directories -------------------------------------------------

def load_prepared(directory) -> tuple[InteractionStream, InteractionStream, InteractionStream, np.ndarray]:
    """Read the three splits of a prepared directory plus test partition labels."""
    directory = Path(directory)
    missing = [name for name in SPLIT_FILES if not (directory / name).is_file()]
    if missing:
        raise DataError(f"{directory}: missing prepared split(s) {', '.join(missing)}")
    train = read_prepared(directory / "train.tsv")
    validation = read_prepared(directory / "validation.tsv", start=len(train))
    test = read_prepared(directory / "test.tsv", start=len(train) + len(validation))
    label_path = directory / "labels.tsv"
    if label_path.is_file():
        titles = {label.title: label for label in PartitionLabel}
        lines = label_path.read_text(encoding="utf-8").split()
        if len(lines) != len(test):
            raise DataError(f"{label_path}: {len(lines)} labels for {len(test)} test interactions")
        try:
            labels = np.array([titles[t] for t in lines], dtype=np.int8)
        except KeyError as exc:
            raise DataError(f"{label_path}: unknown partition label {exc}") from None
    else:
        labels = partition_test(test, train)
    return train, validation, test, labels


def partition_stats(train, validation, test, labels) -> dict:
    counts = np.bincount(labels, minlength=len(PartitionLabel))
    return {
        "interactions": len(train) + len(validation) + len(test),
        "users": int(len(np.unique(np.concatenate([train.users, validation.users, test.users])))),
        "items": int(len(np.unique(np.concatenate([train.items, validation.items, test.items])))),
        "train": len(train),
        "validation": len(validation),
        "test": len(test),
        "partitions": {
            label.title: {"count": int(counts[label]), "percent": round(100.0 * counts[label] / max(len(test), 1), 4)}
            for label in PartitionLabel
        },
    }


# -- commands --------------------------------------------------------------------

def cmd_prepare(args) -> int:
    stream, vocab = ingest(args.input, args.format)
    train, validation, test = split(stream)
    labels = partition_test(test, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLIT_FILES, (train, validation, test)):
        write_canonical(part, out / name)
    vocab.write(out / "vocab.tsv")
    (out / "labels.tsv").write_text("".join(PartitionLabel(int(l)).title + "\n" for l in labels), encoding="utf-8")
    stats = partition_stats(train, validation, test, labels)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{stats['interactions']} interactions, {stats['users']} users, {stats['items']} items")
    for title, part in stats["partitions"].items():
        print(f"  {title:<10} {part['count']:>10}  {part['percent']:.2f}%")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    overrides = {name: getattr(args, name, None) for name in TRAIN_FLAGS}
    for name in ("data", "mode", "nn", "nn_k", "workers"):
        overrides[name] = getattr(args, name, None)
    return resolve(getattr(args, "config", None), overrides)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_rank"])
        for epoch, loss, rank in curve:
            w.writerow([int(epoch), repr(float(loss)), repr(float(rank))])


def cmd_train(args) -> int:
    run = _run_config(args)
    if run.data is None:
        raise ConfigError("train needs --data (or data = ... in the config file)")
    train, validation, _, _ = load_prepared(run.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "config.txt")
    trainer = Trainer(run.train)
    best = trainer.fit(train, validation)
    save_checkpoint(best, out / "checkpoint.felk")
    write_curve(best.curve, out / "curve.csv")
    print(f"best epoch {best.epoch} validation rank {best.val_rank:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    train, validation, test, labels = load_prepared(args.data)
    cfg = ckpt.config
    result = evaluate(
        model.encoder,
        ckpt.cache(),
        train,
        validation,
        test,
        labels,
        args.mode,
        max_len=cfg.max_len,
        batch_size=args.batch_size or cfg.batch_size,
        seed=cfg.seed if args.seed is None else args.seed,
        nn_k=args.nn_k if args.nn else None,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.report.to_csv(out / "report.csv")
    curve = popularity_curve(result.records)
    curve.to_csv(out / "popularity.csv")
    text = result.report.to_text()
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    if args.trace:
        result.records.write_trace(out / "trace.csv")
    print(text)
    print(curve.to_text())
    return EXIT_OK


def cmd_params(args) -> int:
    run = _run_config(args)
    counts = FELRec(run.train).parameter_counts()
    width = max(len(k) for k in counts)
    for name, count in counts.items():
        print(f"{name:<{width}}  {count:>9,}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.what == "cache":
        rows = ckpt.cache().export_tsv(args.out)
        print(f"wrote {rows} cached representations to {args.out}")
    else:
        write_curve(ckpt.curve, args.out)
        print(f"wrote {len(ckpt.curve)} epochs to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from felrec.synthetic import SyntheticSpec, clustered_stream

    spec = SyntheticSpec(
        interactions=args.interactions,
        users=args.users,
        items=args.items,
        clusters=args.clusters,
        user_offset=args.user_offset,
        item_offset=args.item_offset,
    )
    stream = clustered_stream(spec, seed=args.seed).stream
    vocab = Vocabulary(
        [f"u{i}" for i in range(spec.user_offset + spec.users)],
        [f"i{i}" for i in range(spec.item_offset + spec.items)],
    )
    write_canonical(stream, args.out, vocab)
    print(f"wrote {len(stream)} interactions to {args.out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

TRAIN_FLAGS = {
    "variant": dict(choices=("q", "p")),
    "dim": dict(type=int),
    "num_layers": dict(type=int),
    "num_heads": dict(type=int),
    "ff_dim": dict(type=int),
    "dropout": dict(type=float),
    "max_len": dict(type=int),
    "epochs": dict(type=int),
    "warmup_epochs": dict(type=int),
    "batch_size": dict(type=int),
    "lr": dict(type=float),
    "momentum": dict(type=float),
    "tau": dict(type=float),
    "queue_size": dict(type=int),
    "normalize": dict(action="store_true", default=None),
    "norm": dict(choices=("batch", "layer")),
    "no_mlp": dict(action="store_true", default=None),
    "share_mlp": dict(action="store_true", default=None),
    "no_type": dict(action="store_true", default=None),
    "seed": dict(type=int),
    "dtype": dict(choices=("float32", "float64")),
}


def _add_model_flags(parser) -> None:
    parser.add_argument("--config", help="key = value file; flags override it")
    group = parser.add_argument_group("model and training")
    for name, kwargs in TRAIN_FLAGS.items():
        group.add_argument("--" + name.replace("_", "-"), dest=name, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="felrec", description="Streaming recommender with cached entity representations.")
    parser.add_argument("--workers", type=int, default=None, help="BLAS thread count (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="sort, remap, split and label an interaction log")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("movielens", "twitch", "canonical"), default="canonical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model on prepared splits")
    _add_model_flags(p)
    p.add_argument("--data", help="prepared data directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="stream the test split through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared data directory (may differ from training for zero-shot)")
    p.add_argument("--mode", choices=MODES, default="continue")
    p.add_argument("--nn", action="store_true", help="score through the nearest neighbor users")
    p.add_argument("--nn-k", type=int, default=10)
    p.add_argument("--trace", action="store_true", help="also write per-interaction records")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="print parameter counts per component")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("export", help="dump the cache or the training curve of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", choices=("cache", "curves"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="generate a clustered synthetic log in canonical format")
    p.add_argument("--out", required=True)
    p.add_argument("--interactions", type=int, default=100_000)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--user-offset", type=int, default=0)
    p.add_argument("--item-offset", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.workers or 1):
            return args.func(args)
    except ConfigError as exc:
        print(f"felrec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, CacheFormatError, OSError) as exc:
        print(f"felrec: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, NonFiniteGradientError) as exc:
        print(f"felrec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
