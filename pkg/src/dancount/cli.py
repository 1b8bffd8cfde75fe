"""Command-line entry point. Every subcommand prints key=value records."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import TrainConfig, load_config, parse_grid
from .data import load_dataset, read_manifest
from .errors import NumericError, ValidationError
from .evaluation import crossvalidate_5fold, evaluate, infer_count, transfer
from .groundtruth import calibrate_threshold
from .imageio import export_density_pgm, load_image
from .preprocess import preprocess
from .synth import synth_corpus
from .training import (
    finetune_heads,
    format_record,
    load_base,
    load_model,
    pretrain_base,
    resolve_threshold,
    save_base,
    save_model,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

MODE_NAMES = {"gated": "gated", "lcn": "lcn_only", "hcn": "hcn_only", "ideal": "ideal_gate"}
STRATEGY_NAMES = {"wo": "wo_finetune", "step": "step_on_target", "finetune": "finetune_on_target"}


def _print(record: dict) -> None:
    print(format_record(record), flush=True)


def _split(data_dir, config: TrainConfig, split: str):
    """Samples tagged ``split``; a manifest without that tag yields every entry."""
    tags = {e.split for e in read_manifest(data_dir)}
    return load_dataset(data_dir, config, split if split in tags else None)


def cmd_synth(args) -> None:
    path = synth_corpus(args.out, args.n, args.seed, size=args.size, shifted=args.shifted)
    _print({"stage": "synth", "images": args.n, "manifest": path})


def cmd_make_gt(args) -> None:
    config = TrainConfig(input_size=args.size, grid=parse_grid(args.grid),
                         sigma_mode=args.sigma_mode, sigma=args.sigma)
    samples = load_dataset(args.data, config)
    out = os.path.join(args.data, "gt")
    os.makedirs(out, exist_ok=True)
    for s in samples:
        stem = os.path.splitext(s.name)[0]
        np.save(os.path.join(out, f"{stem}_density.npy"), s.density)
        np.save(os.path.join(out, f"{stem}_counts.npy"), s.counts)
        _print({"stage": "make-gt", "image": s.name, "heads": int(s.truth),
                "density_sum": float(s.density.sum(dtype=np.float64))})


def cmd_calibrate(args) -> None:
    config = TrainConfig(input_size=args.size, grid=parse_grid(args.grid))
    samples = _split(args.data, config, "train")
    _print({"th": calibrate_threshold([s.counts for s in samples])})


def cmd_pretrain(args) -> None:
    config = load_config(args.config)
    base = pretrain_base(_split(args.data, config, "train"), config, log=_print)
    save_base(args.out, base, config)
    _print({"stage": "pretrain", "saved": args.out})


def cmd_finetune(args) -> None:
    config = load_config(args.config)
    samples = _split(args.data, config, "train")
    th = resolve_threshold(samples, config)
    _print({"stage": "calibrate", "th": th})
    model = finetune_heads(load_base(args.base), samples, config, th, log=_print)
    save_model(args.out, model, config)
    _print({"stage": "finetune", "saved": args.out})


def cmd_eval(args) -> None:
    config = load_config(args.config)
    model = load_model(args.ckpts, config)
    rep = evaluate(_split(args.data, config, "test"), model, config, MODE_NAMES[args.mode])
    _print(rep.record(stage="eval"))


def cmd_infer(args) -> None:
    config = load_config(args.config)
    model = load_model(args.ckpts, config)
    image, _ = load_image(args.image)
    x, _, _ = preprocess(image, None, config.input_size)
    res = infer_count(x, model)
    _print({"stage": "infer", "image": args.image, "count": res.total,
            "high_cells": int(res.classes.sum()), "cells": int(res.classes.size)})
    if args.heatmap:
        scale = export_density_pgm(res.density, args.heatmap)
        _print({"heatmap": args.heatmap, "scale": scale})


def cmd_cv5(args) -> None:
    config = load_config(args.config)
    crossvalidate_5fold(load_dataset(args.data, config), config, seed=args.seed, log=_print)


def cmd_transfer(args) -> None:
    config = load_config(args.config)
    strategy = STRATEGY_NAMES[args.strategy]
    source = load_base(args.source) if args.source else None
    train = _split(args.data, config, "train")
    test = _split(args.data, config, "test")
    transfer(source, train, test, strategy, config, log=_print)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dancount", description="Density-adaptive crowd counting")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic bimodal corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--shifted", action="store_true", help="use the shifted appearance style")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("make-gt", help="write density and count maps as .npy under DIR/gt")
    s.add_argument("--data", required=True)
    s.add_argument("--sigma-mode", choices=("fixed", "adaptive"), default="fixed")
    s.add_argument("--sigma", type=float, default=4.0)
    s.add_argument("--grid", default="8x8")
    s.add_argument("--size", type=int, default=512)
    s.set_defaults(func=cmd_make_gt)

    s = sub.add_parser("calibrate", help="print the calibrated density threshold")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default="8x8")
    s.add_argument("--size", type=int, default=512)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("pretrain", help="train the shared base on the density loss")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune DAN, LCN and HCN from a base")
    s.add_argument("--data", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="score checkpoints on the test split")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpts", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=tuple(MODE_NAMES), default="gated")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="count heads in one image")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpts", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--heatmap")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("cv5", help="five-fold cross-validation")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_cv5)

    s = sub.add_parser("transfer", help="evaluate a dataset-transfer strategy")
    s.add_argument("--strategy", choices=tuple(STRATEGY_NAMES), required=True)
    s.add_argument("--source")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_transfer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
