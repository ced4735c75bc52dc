"""Command-line surface: dataset generation, training, evaluation, ablation
grids and sample rendering.

Every run directory gets a manifest.json recording the exact configuration,
seed and input hashes, which is sufficient to reproduce the artifacts.
Exit codes: 0 success, 2 usage/input error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, autodiff, datagen, metrics, models, trainer
from .losses import LossWeights


class UsageError(Exception):
    pass


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(config):
    out = {}
    for key, value in config.items():
        if callable(value):
            continue
        if isinstance(value, (str, int, float, bool)) or value is None:
            out[key] = value
        else:
            out[key] = str(value)
    return out


def write_manifest(out_dir, command, config, seed, dataset_paths=()):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": _jsonable(config),
        "seed": seed,
        "code_version": __version__,
        "code_version_hash": hashlib.sha1(__version__.encode()).hexdigest(),
        "datasets": {p: _sha256_file(p) for p in dataset_paths},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _apply_config_file(parser, argv):
    """A `--config file` of key=value lines supplies flag defaults;
    explicit flags win on conflict."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise UsageError("--config needs a file path") from None
    if not os.path.exists(path):
        raise UsageError(f"--config file not found: {path}")
    defaults = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"bad config line (need key=value): {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            defaults[key.replace("-", "_")] = value
    argv = argv[:i] + argv[i + 2 :]
    actions = {}
    for a in parser._actions:
        actions[a.dest] = a
        if isinstance(a, argparse._SubParsersAction):
            for sp in a.choices.values():
                for sa in sp._actions:
                    actions.setdefault(sa.dest, sa)
    unknown = set(defaults) - set(actions)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    typed = {}
    for key, value in defaults.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            typed[key] = value.lower() in ("1", "true", "yes")
        elif action.type is not None:
            typed[key] = action.type(value)
        else:
            typed[key] = value
    parser.set_defaults(**typed)
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            for sp in a.choices.values():
                sp.set_defaults(**{k: v for k, v in typed.items()
                                   if any(sa.dest == k for sa in sp._actions)})
    return argv


def _load_dataset(path):
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    return datagen.read_dataset(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    if args.mode == "scene":
        k = args.classes
        if k is None:
            raise UsageError("--classes is required for --mode scene")
        if k > len(datagen.PALETTE):
            raise UsageError(f"--classes {k} exceeds the palette size ({len(datagen.PALETTE)})")
        if k < 2:
            raise UsageError("--classes must be at least 2")
    else:
        k = args.keypoints
        if k is None:
            raise UsageError("--keypoints is required for --mode keypoint")
        if k < 2:
            raise UsageError("--keypoints must be at least 2")
    os.makedirs(args.out, exist_ok=True)
    ds = datagen.gen_dataset(args.mode, args.n, args.h, args.w, k, seed=args.seed)
    data_path = os.path.join(args.out, "data.sdl")
    datagen.write_dataset(data_path, ds)
    datagen.save_preview(ds, os.path.join(args.out, "preview"), count=min(8, args.n))
    write_manifest(args.out, "gen-data", vars(args), args.seed)
    print(f"wrote {len(ds)} {args.mode} examples to {data_path}")
    return 0


def _config_from_args(args):
    weights = LossWeights(
        lambda_s=args.lambda_s,
        lambda_r=args.lambda_r,
        lambda_fm=args.lambda_fm,
        lambda_perc=0.0 if args.no_perc else args.lambda_perc,
    )
    return trainer.TrainConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup,
        batch_size=args.batch,
        adv_form=args.adv_form,
        num_scales=args.scales,
        weights=weights,
        seed=args.seed,
        variant=args.variant,
        gen_width=args.gen_width,
        gen_residual=args.gen_residual,
        disc_width=args.disc_width,
        checkpoint_every=args.ckpt_every,
    )


def cmd_train(args):
    train_set = _load_dataset(args.data)
    cfg = _config_from_args(args)
    cfg.flags()  # validate the variant name before doing any work
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "train", {**vars(args)}, args.seed, [args.data])
    result = trainer.train(cfg, train_set, out_dir=args.out)
    last = result.log_rows[-1]
    print(
        f"trained {cfg.variant} for {cfg.epochs} epochs "
        f"({last['step']} steps); final L_D={last['l_d']:.4f} L_G={last['l_g']:.4f}"
    )
    print(f"checkpoints: {len(result.checkpoints)}, log: {os.path.join(args.out, 'loss_log.csv')}")
    return 0


def cmd_train_probe(args):
    train_set = _load_dataset(args.data)
    if train_set.mode != "scene":
        raise UsageError("probe training needs a scene-mode dataset")
    probe = metrics.fit_probe(
        train_set.examples,
        train_set.num_channels,
        holdout=args.holdout,
        min_miou=args.min_miou,
        seed=args.seed,
        epochs=args.epochs,
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    models.save_checkpoint(args.out, probe.parameters())
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "train-probe", vars(args), args.seed, [args.data])
    s = probe.holdout_scores
    print(f"probe held-out mIoU={s.miou:.4f} pixel={s.pixel_acc:.4f} class={s.class_acc:.4f}")
    print(f"wrote {args.out}")
    return 0


def _load_probe(path, num_classes):
    if not os.path.exists(path):
        raise UsageError(f"probe checkpoint not found: {path}")
    probe = metrics.ProbeSegmenter(num_classes)
    state = models.load_checkpoint(path)
    models.load_into(probe, state)
    probe.frozen = True
    return probe


def cmd_eval(args):
    test_set = _load_dataset(args.data)
    if not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    probe = None
    if test_set.mode == "scene":
        if args.probe is None:
            raise UsageError("scene-mode evaluation needs --probe")
        probe = _load_probe(args.probe, test_set.num_channels)
    report = metrics.evaluate_checkpoint(
        args.ckpt, test_set, probe=probe,
        gen_width=args.gen_width, gen_residual=args.gen_residual,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    write_manifest(args.out, "eval", vars(args), 0, [args.data, args.ckpt])
    for key in sorted(report):
        print(f"{key}: {report[key]}")
    return 0


def cmd_ablate(args):
    train_set = _load_dataset(args.data)
    test_set = _load_dataset(args.test_data)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in trainer.VARIANTS:
            raise UsageError(f"unknown variant '{v}' (options: {sorted(trainer.VARIANTS)})")
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = _config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "ablate", vars(args), args.seed, [args.data, args.test_data])
    probe = None
    if train_set.mode == "scene":
        if args.probe:
            probe = _load_probe(args.probe, train_set.num_channels)
        else:
            print("training probe segmenter on real pairs...")
            probe = metrics.fit_probe(
                train_set.examples, train_set.num_channels, holdout=args.holdout, seed=args.seed
            )
            models.save_checkpoint(os.path.join(args.out, "probe.sdc"), probe.parameters())

    def progress(row):
        print("  " + " ".join(f"{k}={v}" for k, v in row.items()))

    rows = metrics.ablation_grid(
        train_set, test_set, variants, seeds, cfg, probe, out_dir=args.out, progress=progress
    )
    print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'ablation.csv')}")
    return 0


def cmd_render(args):
    test_set = _load_dataset(args.data)
    if not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    n = min(args.n, len(test_set))
    subset = datagen.Dataset(mode=test_set.mode, examples=test_set.examples[:n])
    state = models.load_checkpoint(args.ckpt)
    gen = models.Generator(test_set.num_channels, width=args.gen_width, num_residual=args.gen_residual)
    models.load_into(gen, state, prefix="gen.")
    outputs = [metrics.generate_images(gen, subset)]
    if args.compare_ckpt:
        gen2 = models.Generator(test_set.num_channels, width=args.gen_width, num_residual=args.gen_residual)
        models.load_into(gen2, models.load_checkpoint(args.compare_ckpt), prefix="gen.")
        outputs.append(metrics.generate_images(gen2, subset))

    h, w = test_set.image_hw
    cols = 2 + len(outputs)
    grid = np.zeros((n * h, cols * w, 3), dtype=np.uint8)
    for i, ex in enumerate(subset.examples):
        row = [
            datagen.image_to_uint8(ex.image),
            datagen.semantics_to_uint8(test_set.mode, ex.semantics),
        ] + [datagen.image_to_uint8(out[i]) for out in outputs]
        for j, tile in enumerate(row):
            grid[i * h : (i + 1) * h, j * w : (j + 1) * w] = tile
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "grid.png")
    datagen.save_png(path, grid)
    write_manifest(args.out, "render", vars(args), 0, [args.data, args.ckpt])
    print(f"wrote {path} ({n} rows x {cols} columns)")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--warmup", type=int, default=None, help="warmup epochs (default: epochs/2)")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lambda-s", type=float, default=1.0, dest="lambda_s")
    p.add_argument("--lambda-r", type=float, default=1.0, dest="lambda_r")
    p.add_argument("--lambda-fm", type=float, default=10.0, dest="lambda_fm")
    p.add_argument("--lambda-perc", type=float, default=10.0, dest="lambda_perc")
    p.add_argument("--no-perc", action="store_true", help="disable the perceptual term")
    p.add_argument("--adv-form", choices=["hinge", "bce"], default="hinge", dest="adv_form")
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--variant", default="c2f+sem+rec", help=f"one of {sorted(trainer.VARIANTS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gen-width", type=int, default=32, dest="gen_width")
    p.add_argument("--gen-residual", type=int, default=3, dest="gen_residual")
    p.add_argument("--disc-width", type=int, default=32, dest="disc_width")
    p.add_argument("--ckpt-every", type=int, default=10, dest="ckpt_every")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semgan",
        description="Conditional GAN lab with a semantically-aware multi-head discriminator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural paired dataset")
    p.add_argument("--mode", choices=["scene", "keypoint"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value file supplying flag defaults")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-probe", help="train the frozen probe segmenter on real pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", type=int, default=64)
    p.add_argument("--min-miou", type=float, default=0.9, dest="min_miou")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_probe)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probe", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--gen-width", type=int, default=32, dest="gen_width")
    p.add_argument("--gen-residual", type=int, default=3, dest="gen_residual")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of variants")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True, dest="test_data")
    p.add_argument("--variants", default="baseline,c2f+sem+rec")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--probe", default=None)
    p.add_argument("--holdout", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value file supplying flag defaults")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="render comparison grids from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--compare-ckpt", default=None, dest="compare_ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--gen-width", type=int, default=32, dest="gen_width")
    p.add_argument("--gen-residual", type=int, default=3, dest="gen_residual")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except datagen.DatasetFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except models.CheckpointFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except autodiff.NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
