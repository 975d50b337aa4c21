"""Command-line surface: data generation, training, evaluation, checks.

Exit codes: 0 success, 1 runtime failure (divergence, failed gradient
checks), 2 usage/config errors (argparse also uses 2).
"""

import argparse
import os
import sys

import numpy as np

from densesim import container
from densesim import data as D
from densesim import evalseg as E
from densesim import train as TR
from densesim.config import load_config, parse_config_text
from densesim.errors import (
    ConfigError,
    GeometryError,
    ParseError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)

_USAGE_ERRORS = (ConfigError, UsageError, ParseError, ShapeError, GeometryError, OSError)


def cmd_gen_data(args):
    images, masks = D.gen_shapes_dataset(args.num, args.classes, args.size, args.seed)
    kinds = D.class_kinds(args.classes)
    os.makedirs(args.out, exist_ok=True)
    D.save_dataset(os.path.join(args.out, "data.dst"), images, masks, kinds)
    manifest = (
        f"images = {args.num}\n"
        f"classes = {args.classes}\n"
        f"size = {args.size}\n"
        f"seed = {args.seed}\n"
        f"stuff_classes = {int((kinds == 0).sum())}\n"
        f"thing_classes = {int((kinds == 1).sum())}\n"
    )
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(manifest)
    sys.stdout.write(manifest)
    return 0


def _load_images(path, need_masks=False):
    images, masks, kinds = D.load_dataset(path)
    if need_masks and (masks is None or kinds is None):
        raise UsageError(f"dataset at {path} has no ground-truth masks")
    return images, masks, kinds


def _run_training(args, mode):
    cfg = load_config(args.config)
    if cfg.mode != mode:
        raise ConfigError(
            f"config sets mode={cfg.mode!r}; this command trains mode={mode!r}"
        )
    images, masks, kinds = _load_images(args.data)
    if mode == "seg" and kinds is not None and cfg.n != len(kinds):
        raise ConfigError(
            f"n={cfg.n} must equal the dataset class count ({len(kinds)})"
        )
    model, state = TR.train_loop(cfg, images, args.out, resume=args.resume)
    sys.stdout.write(f"checkpoint {args.out}\n")
    sys.stdout.write(f"metrics {args.out}.metrics.csv\n")
    sys.stdout.write(f"steps {state.step}\n")
    return 0


def cmd_pretrain(args):
    return _run_training(args, "pretrain")


def cmd_train_seg(args):
    return _run_training(args, "seg")


def _model_from_checkpoint(path):
    from densesim import nn
    from densesim.seeding import derive_rng

    entries = nn.load_checkpoint(path)
    if "meta.config" not in entries:
        raise ParseError(f"{path}: checkpoint has no embedded config")
    cfg = parse_config_text(container.array_to_text(entries["meta.config"]), validate=False)
    model = nn.model_from_config(cfg, derive_rng(cfg.seed, "init"))
    keys = {k for k, _ in model.named_parameters()}
    keys |= {"buffer." + k for k, _ in model.named_buffers()}
    model.load_state_entries({k: v for k, v in entries.items() if k in keys})
    return model, cfg


def cmd_eval_seg(args):
    images, masks, kinds = _load_images(args.data, need_masks=True)
    if args.pred_dir is not None:
        pred_path = os.path.join(args.pred_dir, "preds.dst")
        entries = container.load(pred_path)
        if "masks" not in entries:
            raise ParseError(f"{pred_path}: missing 'masks' entry")
        preds = entries["masks"]
        if preds.shape != masks.shape:
            raise UsageError(
                f"prediction maps {preds.shape} do not match dataset masks {masks.shape}"
            )
    else:
        model, _ = _model_from_checkpoint(args.ckpt)
        preds = E.predict_labels(model, images)
    n_pred = max(len(kinds), int(preds.max()) + 1)
    metrics = E.evaluate_maps(preds, masks, kinds, n_pred=n_pred)
    report = E.render_report(metrics, kinds)
    sys.stdout.write(report)
    csv_path = args.csv if args.csv else args.ckpt + ".eval.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(E.render_csv(metrics, kinds))
    return 0


def cmd_grad_check(args):
    from densesim import gradcheck

    if args.sabotage:
        caught, report = gradcheck.sabotage_check(seed=0)
        if caught:
            sys.stdout.write(f"FAIL sabotage {report}\n")
            return 1
        sys.stdout.write("PASS sabotage (fault went undetected!)\n")
        return 0
    failures = gradcheck.run_suite(stream=sys.stdout, seeds=args.seeds)
    return 0 if failures == 0 else 1


def cmd_inspect(args):
    entries = container.load(args.ckpt)
    n_params = 0
    for name in sorted(entries):
        arr = entries[name]
        sys.stdout.write(
            f"{name} dtype={arr.dtype} shape={'x'.join(str(d) for d in arr.shape)}\n"
        )
        if not name.startswith(("buffer.", "momentum.", "state.", "meta.")):
            n_params += arr.size
    sys.stdout.write(f"parameters {n_params}\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="densesim",
        description="Dense self-supervised similarity learning at desk scale.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--num", type=int, required=True, help="number of images")
    g.add_argument("--classes", type=int, required=True, help="classes incl. background")
    g.add_argument("--size", type=int, default=64, help="image side length")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    for name, fn, blurb in (
        ("pretrain", cmd_pretrain, "representation pretraining"),
        ("train-seg", cmd_train_seg, "unsupervised segmentation training"),
    ):
        t = sub.add_parser(name, help=blurb)
        t.add_argument("--config", required=True)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True, help="checkpoint output path")
        t.add_argument("--resume", default=None, help="checkpoint to continue from")
        t.set_defaults(fn=fn)

    e = sub.add_parser("eval-seg", help="score a checkpoint against labeled data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--pred-dir", default=None,
                   help="directory with preds.dst label maps (skips inference)")
    e.add_argument("--csv", default=None, help="metrics CSV path (default CKPT.eval.csv)")
    e.set_defaults(fn=cmd_eval_seg)

    c = sub.add_parser("grad-check", help="finite-difference check of ops and losses")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--sabotage", action="store_true",
                   help="inject a wrong backward as a negative control")
    c.set_defaults(fn=cmd_grad_check)

    i = sub.add_parser("inspect", help="list checkpoint entries")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        sys.stderr.write(f"error: {exc}\n")
        for key, value in exc.dump.items():
            sys.stderr.write(f"  {key}: {value}\n")
        return 1
    except _USAGE_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
