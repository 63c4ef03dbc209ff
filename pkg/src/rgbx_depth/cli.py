"""Command-line entry point: synth, augment, train, eval, infer, selftest.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

import argparse
import json
import logging
import sys

from . import imageio, selftest
from .augment import AugmentConfig, make_training_sample
from .checkpoint import CheckpointError
from .harness import EvalConfig, TrainConfig, evaluate, infer, train
from .synthscenes import generate_split

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise imageio.ImageFormatError(f"cannot read config {path}: {exc}") from exc


def _load_pairs(directory):
    scenes = imageio.read_scenes(directory)
    if not scenes:
        raise ValueError(f"no '*_rgb.ppm' scenes found in {directory}")
    return [(rgb, gt) for rgb, gt, _ in scenes]


def cmd_synth(args):
    for i, (rgb, gt) in enumerate(generate_split(args.n, args.seed, (args.size, args.size))):
        imageio.write_scene(args.out, f"scene_{i:05d}", rgb, gt)
    print(f"wrote {args.n} scenes to {args.out}")


def cmd_augment(args):
    config = AugmentConfig.from_dict(_read_json(args.config))
    stems = imageio.list_stems(getattr(args, "in"))
    for i, stem in enumerate(stems):
        rgb, gt, _ = imageio.read_scene(getattr(args, "in"), stem)
        sample = make_training_sample(rgb, gt, config, seed=[args.seed, i])
        imageio.write_scene(args.out, stem, sample.rgb, sample.gt, sample.x)
    print(f"wrote {len(stems)} training samples to {args.out}")


def cmd_train(args):
    config = TrainConfig.from_dict(_read_json(args.config))
    pairs = _load_pairs(args.data)
    n_val = int(round(len(pairs) * config.val_fraction))
    if n_val >= len(pairs):
        raise ValueError("val_fraction leaves no training scenes")
    train_split, val_split = pairs[:len(pairs) - n_val], pairs[len(pairs) - n_val:]
    result = train(train_split, val_split, config, args.out, args.log)
    print(f"trained {result.steps} steps; best epoch {result.best_epoch}; checkpoint {args.out}")


def cmd_eval(args):
    levels = tuple(float(v) for v in args.sparsity.split(","))
    config = EvalConfig(sparsity_levels=levels, seed=args.seed)
    table = evaluate(args.ckpt, _load_pairs(args.data), config)
    with open(args.report, "w") as f:
        json.dump({"levels": list(levels), "rows": table}, f, indent=2)
    for row in table:
        print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in row.items()))


def cmd_infer(args):
    pred = infer(args.ckpt, args.rgb, args.x, args.out)
    print(f"wrote {pred.shape[1]}x{pred.shape[0]} depth to {args.out}")


def cmd_selftest(args):
    if not selftest.run(seed=args.seed):
        raise ValueError("selftest failed")


def build_parser():
    parser = argparse.ArgumentParser(prog="rgbx-depth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic RGB + depth scenes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="write degraded (RGB, X, GT) training samples")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the network on a scene directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric table over sparsity levels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sparsity", default="0,0.001,0.01,0.1,1")
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict depth for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--x")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("selftest", help="gradient checks and metric oracles")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (imageio.ImageFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
