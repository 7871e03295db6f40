"""Command-line interface.

Subcommands: ``synth``, ``build-trainset``, ``train``, ``cv``, ``approx``,
``detect`` and ``eval``. Options may also come from a JSON config file
(``--config``); flags given on the command line take precedence. Every
artifact records the effective configuration and its hash.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .imagekit import DecodeError, DimensionError

log = logging.getLogger("ghhdet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


# options that never change an artifact's content
_VOLATILE = ("out", "trace", "verbose", "jobs", "config")


def recorded_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in _VOLATILE}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(recorded_config(cfg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _effective_config(args, parser_defaults):
    """Flags explicitly given beat the config file, which beats the defaults."""
    cfg = dict(parser_defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
        for key, val in file_cfg.items():
            cfg[key.replace("-", "_")] = val
    for key, val in vars(args).items():
        if key in ("func", "config"):
            continue
        if key not in parser_defaults or val != parser_defaults[key]:
            cfg[key] = val
    return cfg


def _jobs(cfg):
    j = cfg.get("jobs")
    return max(1, int(j)) if j else max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def _train_config(cfg):
    from .learner import TrainConfig

    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: cfg[k] for k in names if cfg.get(k) is not None})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg):
    from .synth import SynthConfig, write_stack

    sc = SynthConfig(n_images=cfg["n_images"], width=cfg["width"], height=cfg["height"], n_blobs=cfg["n_blobs"],
                     n_corners=cfg["n_corners"], seed=cfg["seed"])
    paths, scene = write_stack(cfg["out"], sc, cfg.get("n_train"))
    print(f"wrote {len(paths)} images with {len(scene.points)} features to {cfg['out']}")


def _read_scene(scene_dir):
    from .evalkit import list_images
    from .imagekit import read_image

    d = Path(scene_dir)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    paths = list_images(d)
    if not paths:
        raise DataError(f"no images in {d}")
    images, bad = [], []
    for p in paths:
        try:
            images.append(read_image(p))
        except (DecodeError, OSError) as exc:
            bad.append(f"{p.name}: {exc}")
    if bad:
        raise DataError("unreadable images:\n  " + "\n  ".join(bad))
    return paths, images


def cmd_build_trainset(cfg):
    from .trainset import DogConfig, ImageStack, NegativeConfig, build_training_set, read_keypoint_file, save_training_set

    paths, images = _read_scene(cfg["scene_dir"])
    stack = ImageStack(images, [p.name for p in paths])
    external = None
    kd = cfg.get("keypoints_dir")
    if kd is None and (Path(cfg["scene_dir"]) / "keypoints").is_dir():
        kd = Path(cfg["scene_dir"]) / "keypoints"
    if kd:
        external = []
        for i, p in enumerate(paths):
            found = [f for f in (Path(kd) / f"{p.name}.txt", Path(kd) / f"{p.stem}.txt") if f.exists()]
            if not found:
                raise DataError(f"missing keypoint file for {p.name} in {kd}")
            external.append(read_keypoint_file(found[0], i))
    neg = NegativeConfig(max_cells=cfg["max_cells"])
    ts, anchors = build_training_set(
        stack, DogConfig(), cfg["max_anchors"], cfg["min_support"], cfg["patch_size"], neg, cfg["seed"], external
    )
    if ts.K_p == 0:
        raise DataError("no consensus anchors found; nothing to train on")
    save_training_set(ts, cfg["out"], {**recorded_config(cfg), "config_hash": config_hash(cfg)})
    print(f"anchors kept: {ts.meta['n_anchors']}  K: {ts.K}  K_p: {ts.K_p}")


def cmd_train(cfg):
    from .ghh import save_model
    from .learner import train_greedy
    from .trainset import load_training_set

    ts = load_training_set(cfg["trainset"])
    tcfg = _train_config(cfg)
    trace = []
    trace_path = cfg.get("trace") or str(Path(cfg["out"]).with_suffix(".trace.jsonl"))
    try:
        model = train_greedy(ts, tcfg, trace=trace)
    finally:
        with open(trace_path, "w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_model(model, cfg["out"], {"config": recorded_config(cfg), "config_hash": config_hash(cfg)})
    print(f"model: {model.n_filters} filters, objective {trace[-1]['objective']:.6g}; trace in {trace_path}")


def cmd_cv(cfg):
    from .learner import cross_validate, default_grid
    from .trainset import load_training_set

    ts = load_training_set(cfg["trainset"])
    images = np.unique(ts.image)
    n_val = max(1, int(round(cfg["val_fraction"] * len(images))))
    if n_val >= len(images):
        raise DataError("validation split leaves no training images")
    val_ids = images[-n_val:]
    train = ts.split_by_image([i for i in images if i not in val_ids])
    val = ts.split_by_image(val_ids)
    grid = default_grid(cfg["grid_points"], cfg["grid_low"], cfg["grid_high"])
    best, table = cross_validate(train, val, grid, _train_config(cfg))
    out = cfg.get("out") or "cv_table.csv"
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["gamma_c", "gamma_s", "gamma_t", "score"])
        for row in table:
            wr.writerow([f"{row['gamma_c']:g}", f"{row['gamma_s']:g}", f"{row['gamma_t']:g}", f"{row['score']:.6f}"])
    print("best gamma_c={:g} gamma_s={:g} gamma_t={:g}; table in {}".format(*best, out))


def cmd_approx(cfg):
    from dataclasses import replace

    from .ghh import load_model, save_model
    from .sepfilters import approximate_separable

    model = load_model(cfg["model"])
    bank = approximate_separable(model, cfg["S"])
    out = cfg.get("out") or cfg["model"]
    save_model(replace(model, separable=bank), out, {"config": recorded_config(cfg), "config_hash": config_hash(cfg)})
    print(f"S={bank.S}: total reconstruction error {bank.total_error:.6g}")


def _score(model, img, separable, jobs):
    from .ghh import score_map
    from .imagekit import compute_feature_stack
    from .sepfilters import score_map_separable

    fs = compute_feature_stack(img, model.normalization)
    if separable:
        if model.separable is None:
            raise DataError("model has no separable approximation; run 'approx' first")
        return score_map_separable(model, model.separable, fs, jobs)
    return score_map(model, fs, jobs)


def cmd_detect(cfg):
    from .detector import nonmax_suppress, select_keypoints, write_keypoints
    from .evalkit import budget_for_random_rate
    from .ghh import load_model
    from .imagekit import read_image

    model = load_model(cfg["model"])
    img = read_image(cfg["image"])
    smap = _score(model, img, cfg["separable"], _jobs(cfg))
    kps = nonmax_suppress(smap, cfg["nms_radius"])
    if cfg.get("budget2pct"):
        kps = select_keypoints(kps, budget_for_random_rate(img.shape[1], img.shape[0], cfg["threshold_px"]))
    elif cfg.get("budget") is not None:
        kps = select_keypoints(kps, cfg["budget"])
    elif cfg.get("threshold") is not None:
        kps = select_keypoints(kps, threshold=cfg["threshold"])
    out = cfg.get("out") or str(Path(cfg["image"]).with_suffix(".txt"))
    write_keypoints(out, kps)
    print(f"{len(kps)} keypoints written to {out}")


def cmd_eval(cfg):
    from .evalkit import EvalConfig, evaluate_sequence
    from .ghh import load_model

    src = Path(cfg["detector"])
    detector = load_model(src) if src.is_file() else src
    if not src.exists():
        raise DataError(f"{src} does not exist")
    budget = "2pct" if cfg["budget2pct"] else cfg.get("budget")
    ec = EvalConfig(
        mode=cfg["mode"], threshold_px=cfg["threshold_px"], budget=budget, pairs=cfg["pairs"], kind=cfg["kind"],
        nms_radius=cfg["nms_radius"], separable=cfg["separable"], seed=cfg["seed"], jobs=_jobs(cfg),
    )
    report = evaluate_sequence(cfg["dataset"], detector, ec)
    report.config["config_hash"] = config_hash(cfg)
    report.write(cfg["out"])
    for seq, modes in report.summary.items():
        for mode, s in modes.items():
            print(f"{seq} {mode}: mean {s['mean']:.4f} std {s['std']:.4f} over {s['pairs']} pairs")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--gamma-c", type=float, default=1e-3)
    p.add_argument("--gamma-s", type=float, default=1e-2)
    p.add_argument("--gamma-t", type=float, default=1e-2)
    p.add_argument("-N", dest="N", type=int, default=4, help="number of components")
    p.add_argument("-M", dest="M", type=int, default=4, help="hyperplanes per component")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=None, help="template zero radius (default (P-1)/4)")
    p.add_argument("--pca-dim", type=int, default=1024)
    p.add_argument("--newton-iters", type=int, default=10)
    p.add_argument("--refine-sweeps", type=int, default=3)


def build_parser():
    parser = argparse.ArgumentParser(prog="ghhdet", description="Learned illumination-robust keypoint detector.")
    parser.add_argument("--version", action="version",
                        version=f"ghhdet {__version__} (model schema 1, training-set archive 1)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=None, help="worker threads (default: available CPUs)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic illumination stack")
    p.add_argument("out")
    p.add_argument("--n-images", type=int, default=20)
    p.add_argument("--n-train", type=int, default=None, help="split into train/ and test/ folders")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--n-blobs", type=int, default=24)
    p.add_argument("--n-corners", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-trainset", parents=[common], help="build a training-set archive from an image stack")
    p.add_argument("scene_dir")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--patch-size", type=int, default=21)
    p.add_argument("--max-anchors", type=int, default=100)
    p.add_argument("--min-support", type=float, default=0.5)
    p.add_argument("--max-cells", type=int, default=200)
    p.add_argument("--keypoints-dir", help="per-image candidate files 'x y scale [response]' (default: <scene_dir>/keypoints if present)")
    p.set_defaults(func=cmd_build_trainset)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("trainset")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--trace", help="JSON-lines training trace (default: <out>.trace.jsonl)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", parents=[common], help="grid search for the loss weights")
    p.add_argument("trainset")
    p.add_argument("-o", "--out", help="CSV table (default cv_table.csv)")
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--grid-points", type=int, default=5)
    p.add_argument("--grid-low", type=float, default=1e-4)
    p.add_argument("--grid-high", type=float, default=1e2)
    _add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("approx", parents=[common], help="add a separable approximation to a model")
    p.add_argument("model")
    p.add_argument("-S", dest="S", type=int, default=24)
    p.add_argument("-o", "--out", help="output model (default: overwrite input)")
    p.set_defaults(func=cmd_approx)

    p = sub.add_parser("detect", parents=[common], help="detect keypoints in one image")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("-o", "--out", help="keypoint file (default: <image>.txt)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--budget", type=int)
    g.add_argument("--threshold", type=float)
    g.add_argument("--budget2pct", action="store_true", help="budget at which random keypoints repeat 2%%")
    p.add_argument("--threshold-px", type=float, default=5.0)
    p.add_argument("--separable", action="store_true")
    p.add_argument("--nms-radius", type=int, default=5)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="repeatability over image sequences")
    p.add_argument("dataset")
    p.add_argument("detector", help="model JSON or directory of keypoint files")
    p.add_argument("-o", "--out", default="eval_out")
    p.add_argument("--mode", choices=["one_to_one", "standard", "both"], default="one_to_one")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--budget", type=int)
    g.add_argument("--budget2pct", action="store_true")
    p.add_argument("--threshold-px", type=float, default=5.0)
    p.add_argument("--pairs", choices=["auto", "all", "reference"], default="auto")
    p.add_argument("--kind", choices=["auto", "stack", "homography"], default="auto")
    p.add_argument("--nms-radius", type=int, default=5)
    p.add_argument("--separable", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def _defaults_for(parser, command):
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    return {a.dest: a.default for a in sub._actions if a.dest not in ("help", "func")}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    from .learner import NumericalFailure
    from .evalkit import EvaluationError

    try:
        cfg = _effective_config(args, _defaults_for(parser, args.command))
        cfg["command"] = args.command
        args.func(cfg)
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DecodeError, DimensionError, EvaluationError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
