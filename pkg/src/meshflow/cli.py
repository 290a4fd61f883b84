"""Command-line interface.

Subcommands: generate-data, train, infer, eval, crossval, export-viz.
Global flags: --config <json file>, --seed, --out-dir. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.

The config file is a JSON object whose keys mirror TrainConfig fields
("feature_mode", "epochs", "lr", "accumulation_steps", "fold_count",
"max_steps", ...) with the loss settings nested under "loss"
({"variant", "sample_count", "alpha", "rng_seed"}). Dataset generation
reads the optional "data" object ({"subjects", "frames_per_subject",
"vertex_budget", "kind", "img_dims", "noise_sigma", ...}).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline, synthdata
from .image import ImageError, load_pgm, load_raw
from .mesh import MeshError, load_obj, save_obj
from .pipeline import Model, NumericalError, TrainConfig
from .synthdata import DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _load_config(args):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    return raw


def _train_config(raw):
    data_cfg = raw.pop("data", None)
    cfg = TrainConfig(**raw)
    return cfg, (data_cfg or {})


def _load_slice(path):
    if path.endswith(".pgm"):
        return load_pgm(path)
    return load_raw(path)


def cmd_generate_data(args):
    raw = _load_config(args)
    data_cfg = raw.get("data", {})
    subjects = data_cfg.pop("subjects", 8)
    frames = data_cfg.pop("frames_per_subject", 40)
    seed = raw.get("seed", 0)
    synthdata.make_dataset(args.out_dir, subjects, frames, seed, **data_cfg)
    print(f"wrote {subjects} subjects x {frames} frames to {args.out_dir}")
    return EXIT_OK


def cmd_train(args):
    cfg, _ = _train_config(_load_config(args))
    dataset = synthdata.load_dataset(args.dataset)
    subjects = [int(s) for s in args.subjects.split(",")] if args.subjects else None
    _, ckpt = pipeline.train(dataset, cfg, args.out_dir, train_subjects=subjects)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_infer(args):
    model = Model.load(args.checkpoint)
    reference = load_obj(args.reference)
    img = _load_slice(args.slice)
    pred, seconds = pipeline.infer(model, reference, img)
    save_obj(pred, args.output)
    print(f"wrote {args.output} (inference {seconds * 1000.0:.2f} ms)")
    return EXIT_OK


def cmd_eval(args):
    model = Model.load(args.checkpoint)
    dataset = synthdata.load_dataset(args.dataset)
    subjects = (
        [int(s) for s in args.subjects.split(",")] if args.subjects else list(range(len(dataset)))
    )
    report = pipeline.evaluate(model, dataset, subjects)
    csv_path, json_path = report.save(args.out_dir)
    print(f"wrote {csv_path} and {json_path}")
    print(
        "avg_error_mm {avg_error_mm_mean:.4f} +/- {avg_error_mm_std:.4f}, "
        "chamfer_l2 {chamfer_l2_mean:.6f} +/- {chamfer_l2_std:.6f}".format(**report.aggregates)
    )
    return EXIT_OK


def cmd_crossval(args):
    cfg, _ = _train_config(_load_config(args))
    dataset = synthdata.load_dataset(args.dataset)
    _, aggregate = pipeline.crossval(dataset, cfg, args.out_dir)
    print(
        f"crossval avg_error_mm {aggregate['avg_error_mm_mean']:.4f} "
        f"+/- {aggregate['avg_error_mm_std']:.4f} over {len(aggregate['fold_avg_error_mm'])} folds"
    )
    return EXIT_OK


def cmd_export_viz(args):
    pred = load_obj(args.pred)
    truth = load_obj(args.truth)
    paths = pipeline.export_viz(pred, truth, args.out_dir)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="meshflow",
        description="Deform a reference organ mesh from a 2-D surrogate slice.",
    )
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="generate a synthetic breathing dataset")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--subjects", help="comma-separated training subject ids (default: all)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="deform a reference mesh from one slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True, help="reference mesh (OBJ)")
    p.add_argument("--slice", required=True, help="surrogate slice (PGM or raw + sidecar)")
    p.add_argument("--output", required=True, help="output mesh path (OBJ)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out subjects")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--subjects", help="comma-separated held-out subject ids")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="subject-level k-fold cross-validation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("export-viz", help="signed-distance PLY and contour CSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (DataError, MeshError, ImageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TypeError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
