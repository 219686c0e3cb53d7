"""Command-line entry point.

Sub-commands: ``train``, ``upsample``, ``eval``, ``pca`` and ``export-features``.
Exit status is 0 on success, 2 for usage or validation problems and 3 when
training hits a non-finite loss.

Every command accepts ``--config FILE`` holding a flat JSON object keyed by
flag names (dashes or underscores). Flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from agnostic_upsampler.errors import FormatError, NumericalError, ValidationError
from agnostic_upsampler.feature_io import load_image, read_feature_map, save_image, write_feature_map
from agnostic_upsampler.toy_encoder import EncoderConfig, encode, encode_dense

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3

class UsageError(Exception):
    pass


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with default values for any flag of this command")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agnostic-upsampler", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an upsampler checkpoint")
    _add_config(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="directory of PNG training images")
    src.add_argument("--synthetic", type=int, metavar="N", help="render N procedural training images")
    p.add_argument("--out", type=Path, help="output checkpoint directory (required)")
    p.add_argument("--steps", type=int, help="optimizer steps (default 2000)")
    p.add_argument("--lr", type=float, help="learning rate (default 2e-4)")
    p.add_argument("--batch-size", type=int, help="images per step (default 4)")
    p.add_argument("--crops", type=int, help="crops per image (default 4)")
    p.add_argument("--image-size", type=int, help="training image size S (default 64)")
    p.add_argument("--crop-size", type=int, help="crop size (default 32)")
    p.add_argument("--w-main", type=float, help="crop-consistency weight (default 1.0)")
    p.add_argument("--w-input", type=float, help="input-consistency weight (default 0.1)")
    p.add_argument("--w-self", type=float, help="self-consistency weight (default 0.1)")
    p.add_argument("--checkpoint-every", type=int, help="steps between periodic checkpoints (default 500)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume from")
    p.add_argument("--seed", type=int, help="training seed (default 0)")

    p = sub.add_parser("upsample", help="upsample an ANYT feature map guided by a PNG image")
    _add_config(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory")
    p.add_argument("--features", type=Path, help="input ANYT feature map")
    p.add_argument("--image", type=Path, help="guidance PNG image")
    p.add_argument("--out", type=Path, help="output ANYT path")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="output grid (default: image size)")
    p.add_argument("--radius", type=int, help="override the window radius")

    p = sub.add_parser("eval", help="linear-probe evaluation on the synthetic probing set")
    _add_config(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (needed for --method model)")
    p.add_argument("--method", choices=["model", "nearest", "bilinear"], help="upsampler to evaluate (default model)")
    p.add_argument("--protocol", choices=["probe", "preserve"], help="probe source (default probe)")
    p.add_argument("--task", choices=["segmentation", "depth"], help="probe task (default segmentation)")
    p.add_argument("--train-images", type=int, help="probe training images (default 8)")
    p.add_argument("--test-images", type=int, help="evaluation images (default 8)")
    p.add_argument("--num-classes", type=int, help="segmentation classes (default 4)")
    p.add_argument("--seed", type=int, help="dataset and probe seed (default 0)")
    p.add_argument("--out", type=Path, help="write the metric report here as key=value lines")

    p = sub.add_parser("pca", help="render a feature map as RGB via its top-3 principal components")
    _add_config(p)
    p.add_argument("--features", type=Path, help="input ANYT feature map")
    p.add_argument("--basis", type=Path, help="ANYT map that defines the principal axes")
    p.add_argument("--out", type=Path, help="output PNG path")

    p = sub.add_parser("export-features", help="encode a PNG with the toy patch encoder")
    _add_config(p)
    p.add_argument("--image", type=Path, help="input PNG image")
    p.add_argument("--patch", type=int, help="patch size P (default 8)")
    p.add_argument("--dim", type=int, help="feature channels (default 32)")
    p.add_argument("--hidden", type=int, help="hidden width (default 64)")
    p.add_argument("--seed", type=int, help="encoder weight seed (default 0)")
    p.add_argument("--stride", type=int, help="dense stride; defaults to the patch size")
    p.add_argument("--out", type=Path, help="output ANYT path")
    return parser


DEFAULTS = {
    "train": dict(steps=2000, lr=2e-4, batch_size=4, crops=4, image_size=64, crop_size=32, w_main=1.0,
                  w_input=0.1, w_self=0.1, checkpoint_every=500, seed=0),
    "upsample": {},
    "eval": dict(method="model", protocol="probe", task="segmentation", train_images=8, test_images=8,
                 num_classes=4, seed=0),
    "pca": {},
    "export-features": dict(patch=8, dim=32, hidden=64, seed=0),
}
REQUIRED = {
    "train": ("out",),
    "upsample": ("checkpoint", "features", "image", "out"),
    "eval": (),
    "pca": ("features", "out"),
    "export-features": ("image", "out"),
}


def _config_argv(path: Path) -> list[str]:
    try:
        with open(path) as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    argv = []
    for key, value in values.items():
        if value is None:
            continue
        argv.append("--" + key.replace("_", "-"))
        argv += [str(v) for v in value] if isinstance(value, list) else [str(value)]
    return argv


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill unset flags from ``--config`` and then from the built-in defaults.

    Config values are parsed by the same sub-parser as real flags, so they get
    the same type checks and unknown keys are rejected.
    """
    values = dict(DEFAULTS[args.command])
    known = set(vars(args)) - {"command", "verbose", "config"}
    if args.config is not None:
        file_args = parser.parse_args([args.command, *_config_argv(args.config)])
        values.update({k: v for k, v in vars(file_args).items() if k in known and v is not None})
    values.update({k: getattr(args, k) for k in known if getattr(args, k) is not None})
    for dest in known:
        setattr(args, dest, values.get(dest))
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return args


def cmd_train(args) -> int:
    from agnostic_upsampler.losses import LossWeights
    from agnostic_upsampler.synthetic import make_dataset
    from agnostic_upsampler.training import TrainConfig, train

    if args.data is None and args.synthetic is None:
        raise UsageError("give --data DIR or --synthetic N")
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic must be positive")
        dataset = make_dataset(args.synthetic, args.image_size, seed=args.seed)
    else:
        if not args.data.is_dir():
            raise UsageError(f"{args.data} is not a directory")
        dataset = sorted(args.data.glob("*.png"))
    config = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        crops_per_image=args.crops,
        total_steps=args.steps,
        image_size=args.image_size,
        crop_size=args.crop_size,
        seed=args.seed,
        loss_weights=LossWeights(args.w_main, args.w_input, args.w_self),
        checkpoint_every=args.checkpoint_every,
    )
    _, rows = train(config, dataset, out_dir=args.out, resume_from=args.resume)
    last = rows[-1] if rows else None
    if last is not None:
        print(f"step {last['step']} loss_main {last['loss_main']} loss_total {last['loss_total']}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_upsample(args) -> int:
    from agnostic_upsampler.training import load_checkpoint
    from agnostic_upsampler.upsampler import upsample

    model = load_checkpoint(args.checkpoint).model
    p = read_feature_map(args.features)
    image = load_image(args.image)
    out = upsample(model, image, p, out_size=tuple(args.size) if args.size else None, window_radius=args.radius)
    write_feature_map(out.astype(np.float32), args.out)
    print(f"{p.shape} -> {out.shape} written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from agnostic_upsampler.eval_probe import (
        bilinear_forward,
        make_probe_dataset,
        model_forward,
        nearest_forward,
        run_protocol,
    )

    if args.method == "model":
        if args.checkpoint is None:
            raise UsageError("--method model needs --checkpoint")
        from agnostic_upsampler.training import load_checkpoint

        forward = model_forward(load_checkpoint(args.checkpoint).model)
    else:
        forward = nearest_forward if args.method == "nearest" else bilinear_forward
    if args.train_images < 1 or args.test_images < 1:
        raise UsageError("image counts must be positive")
    data = make_probe_dataset(
        args.train_images + args.test_images, task=args.task, num_classes=args.num_classes, seed=args.seed
    )
    num_classes = args.num_classes if args.task == "segmentation" else None
    report, _ = run_protocol(
        forward, data[: args.train_images], data[args.train_images:], args.protocol, args.task,
        num_classes=num_classes, seed=args.seed,
    )
    report.notes["method"] = args.method
    text = report.to_text()
    sys.stdout.write(text)
    if args.out is not None:
        report.write(args.out)
    return EXIT_OK


def cmd_pca(args) -> int:
    from agnostic_upsampler.eval_probe import pca_rgb

    basis = read_feature_map(args.basis) if args.basis is not None else None
    save_image(pca_rgb(read_feature_map(args.features), basis_source=basis), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    config = EncoderConfig(patch_size=args.patch, feature_dim=args.dim, seed=args.seed, hidden_dim=args.hidden)
    image = load_image(args.image)
    stride = args.stride if args.stride is not None else args.patch
    feats = encode(image, config) if stride == args.patch else encode_dense(image, config, stride)
    write_feature_map(feats, args.out)
    print(f"{feats.shape} written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "upsample": cmd_upsample,
    "eval": cmd_eval,
    "pca": cmd_pca,
    "export-features": cmd_export_features,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = resolve(args, parser)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse rejecting a config file value
        return exc.code
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValidationError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
