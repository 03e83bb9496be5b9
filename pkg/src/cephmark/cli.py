"""Command-line surface: train, eval, predict, make-synthetic.

Exit codes: 0 success, 1 validation/config error, 2 I/O error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DatasetSplit, generate_synthetic, write_dataset
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .metrics import format_report, write_report
from .training import evaluate, load_train_config, predict, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _add_train_parser(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, type=Path, help="key-value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dataset-dir", dest="dataset_dir", type=Path, default=None)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir", type=Path, default=None)
    p.add_argument("--backbone", default=None)
    p.add_argument("--n-landmarks", dest="n_landmarks", type=int, default=None)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--optimizer", default=None)
    p.add_argument("--network-height", dest="network_height", type=int, default=None)
    p.add_argument("--network-width", dest="network_width", type=int, default=None)
    p.add_argument("--fused-channels", dest="fused_channels", type=int, default=None)
    p.add_argument("--lateral-channels", dest="lateral_channels", type=int, default=None)
    p.add_argument("--attn-hidden", dest="attn_hidden", type=int, default=None)
    p.add_argument("--weights-source", dest="weights_source", type=Path, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--early-stop-mre-mm", dest="early_stop_mre_mm", type=float, default=None)


def _parse_extent(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError(f"extent must look like 640x800 (WxH), got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cephmark", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_train_parser(sub)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="report file to write")
    p.add_argument("--split", default="test", choices=("train", "validate", "test"))

    p = sub.add_parser("predict", help="predict landmarks for one image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None, help="landmark text file to write")
    p.add_argument("--dump-maps", dest="dump_maps", type=Path, default=None)

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset directory")
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--extent", required=True, help="WxH, e.g. 128x128")
    p.add_argument("--landmarks", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--min-separation", dest="min_separation", type=float, default=16.0)
    p.add_argument("--spacing-mm", dest="spacing_mm", type=float, default=1.0)
    p.add_argument(
        "--split-counts",
        dest="split_counts",
        default=None,
        help="train,validate,test counts (default: everything in train)",
    )
    return parser


_TRAIN_OVERRIDE_KEYS = (
    "seed",
    "dataset_dir",
    "checkpoint_dir",
    "backbone",
    "n_landmarks",
    "radius",
    "alpha",
    "epochs",
    "batch_size",
    "optimizer",
    "network_height",
    "network_width",
    "fused_channels",
    "lateral_channels",
    "attn_hidden",
    "weights_source",
    "threads",
    "early_stop_mre_mm",
)


def _run_make_synthetic(args: argparse.Namespace) -> None:
    extent = _parse_extent(args.extent)
    samples = generate_synthetic(
        count=args.count,
        extent=extent,
        n_landmarks=args.landmarks,
        seed=args.seed,
        min_separation=args.min_separation,
        spacing_mm=args.spacing_mm,
    )
    split = None
    if args.split_counts:
        try:
            n_train, n_val, n_test = (int(x) for x in args.split_counts.split(","))
        except ValueError:
            raise ConfigError(f"--split-counts must be three integers, got {args.split_counts!r}") from None
        if n_train + n_val + n_test != args.count:
            raise ConfigError("--split-counts must sum to --count")
        ids = [f"{i:04d}" for i in range(args.count)]
        split = DatasetSplit(
            train=tuple(ids[:n_train]),
            validate=tuple(ids[n_train : n_train + n_val]),
            test=tuple(ids[n_train + n_val :]),
        )
    write_dataset(samples, args.out, split=split)
    print(f"wrote {args.count} samples to {args.out}")


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "train":
        overrides = {key: getattr(args, key) for key in _TRAIN_OVERRIDE_KEYS}
        cfg = load_train_config(args.config, overrides)
        manifest = train(cfg)
        print(
            f"best checkpoint at epoch {manifest.epoch}: "
            f"validation MRE {manifest.val_mre_mm:.4f} mm ({cfg.checkpoint_dir / 'best.npz'})"
        )
    elif args.command == "eval":
        report = evaluate(args.checkpoint, args.dataset, split=args.split)
        print(format_report(report))
        write_report(report, args.out)
    elif args.command == "predict":
        landmarks = predict(args.checkpoint, args.image, out_path=args.out, dump_dir=args.dump_maps)
        for x, y in landmarks.points:
            print(f"{x:.3f},{y:.3f}")
    elif args.command == "make-synthetic":
        _run_make_synthetic(args)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        _dispatch(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
