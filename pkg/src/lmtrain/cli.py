"""Command-line interface: ``lmtrain {train,eval,generate,render}``.

Every config key has a flag; when both a ``--config`` file and a flag set the
same key, the flag wins. Exit codes: 0 success, 2 config or usage error,
3 data error (missing/malformed files), 4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .experiment import (
    ConfigError,
    DataError,
    NumericError,
    load_config,
    run_eval,
    run_generate,
    run_render,
    run_training,
)
from .metrics import SDR_THRESHOLDS

# flag destination -> ExperimentConfig attribute
_OVERRIDE_ATTRS = {
    "data": "manifest",
    "synthetic": "synthetic_count",
    "labels": "num_labels",
    "size": "size",
    "depth": "depth",
    "base_channels": "base_channels",
    "dilate": "dilate",
    "erode_step": "erode_step",
    "period": "period",
    "se": "se",
    "lr": "lr",
    "batch": "batch_size",
    "epochs": "epochs",
    "rotation_aug": "rotation_aug",
    "max_deg": "max_deg",
    "seed": "seed",
    "out": "out_dir",
}


def _overrides(args: argparse.Namespace) -> dict:
    return {
        attr: getattr(args, dest)
        for dest, attr in _OVERRIDE_ATTRS.items()
        if hasattr(args, dest) and getattr(args, dest) is not None
    }


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its keys")
    p.add_argument("--size", type=int, help="standard square image size")
    p.add_argument("--depth", type=int, help="U-Net pooling levels")
    p.add_argument("--base-channels", type=int, help="channels at the first level")
    p.add_argument("--seed", type=int, help="root random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmtrain", description="Landmark detection with a dilate-then-erode label curriculum."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model and evaluate the validation split")
    _add_model_flags(train)
    train.add_argument("--data", help="dataset manifest path")
    train.add_argument("--synthetic", type=int, metavar="COUNT", help="generate COUNT synthetic samples instead of --data")
    train.add_argument("--labels", type=int, help="landmark count for synthetic data")
    train.add_argument("--dilate", type=int, help="initial dilation iterations (0 = plain point labels)")
    train.add_argument("--erode-step", type=int, help="iterations removed at each period boundary")
    train.add_argument("--period", type=int, help="epochs between erosion steps")
    train.add_argument("--se", choices=["square3", "cross3"], help="structuring element")
    train.add_argument("--lr", type=float, help="Adam learning rate")
    train.add_argument("--batch", type=int, help="batch size")
    train.add_argument("--epochs", type=int, help="training epochs")
    train.add_argument("--rotation-aug", action=argparse.BooleanOptionalAction, help="random-rotation augmentation")
    train.add_argument("--max-deg", type=float, help="maximum augmentation angle")
    train.add_argument("--out", help="output directory owned by this run")
    train.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    _add_model_flags(ev)
    ev.add_argument("--checkpoint", required=True, help="model checkpoint (.lckp)")
    ev.add_argument("--data", required=True, help="dataset manifest path")
    ev.add_argument("--batch", type=int, help="evaluation batch size")
    ev.add_argument("--out", default="eval.csv", help="report CSV path (default eval.csv)")
    ev.set_defaults(handler=_cmd_eval)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--count", type=int, required=True, help="number of samples")
    gen.add_argument("--labels", type=int, required=True, help="landmarks per sample (1-8)")
    gen.add_argument("--size", type=int, default=64, help="image side length (default 64)")
    gen.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    gen.add_argument("--out", required=True, help="dataset directory")
    gen.set_defaults(handler=_cmd_generate)

    render = sub.add_parser("render", help="overlay predictions (red) and truth (blue) on one sample")
    _add_model_flags(render)
    render.add_argument("--checkpoint", required=True, help="model checkpoint (.lckp)")
    render.add_argument("--data", required=True, help="dataset manifest path")
    render.add_argument("--sample", type=int, default=0, help="manifest sample index (default 0)")
    render.add_argument("--out", required=True, help="output PNG path")
    render.set_defaults(handler=_cmd_render)
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    record = run_training(config)
    report = record.report
    print(f"validation Mean RMSE {report.mean_rmse:.4f} px over {len(report.entries)} pairs")
    print(f"artifacts in {record.out_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    overrides = {k: v for k, v in _overrides(args).items() if k not in ("manifest", "out_dir")}
    config = load_config(args.config, overrides)
    report = run_eval(config, args.checkpoint, args.data, args.out)
    print(f"Mean RMSE {report.mean_rmse:.4f} px ({report.skipped} skipped)")
    for t in SDR_THRESHOLDS:
        print(f"SDR<{t:g} {report.sdr[t]:.2f}%")
    print(f"report written to {args.out}")
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    manifest = run_generate(args.count, args.size, args.labels, args.seed, args.out)
    print(f"wrote {args.count} samples, manifest at {manifest}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    overrides = {k: v for k, v in _overrides(args).items() if k not in ("manifest", "out_dir")}
    config = load_config(args.config, overrides)
    path = run_render(config, args.checkpoint, args.data, args.sample, args.out)
    print(f"overlay written to {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
