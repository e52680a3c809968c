"""``deformseg`` command line: synth, train, segment, eval and crossval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config
from .data import (DatasetManifest, ManifestEntry, load_and_normalize, load_dataset,
                   rasterize_shape, save_mask, write_overlay_png)
from .evaluation import crossval, shape_scores, space_errors
from .exceptions import DeformsegError, DivergenceError, MissingDetectorError
from .metrics import EvalReport
from .pipeline import DeformableSegmenter
from .synthetic import SyntheticSpec, generate_synthetic_dataset, write_synthetic_dataset

log = logging.getLogger("deformseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag, config path ("*" = every detector network), type, consuming module, description
HYPERPARAMETERS = (
    ("--r", "line.r", int, "space-learning", "line strip half-width r"),
    ("--line-top-n", "line.top_n", int, "space-learning", "line positions averaged"),
    ("--line-search-margin", "line.search_margin", float, "space-learning",
     "line search window padding as a fraction of the axis"),
    ("--orient-step", "orientation.step", float, "space-learning", "orientation scan step (rad)"),
    ("--orient-range", "orientation.range", float, "space-learning", "orientation scan half-range (rad)"),
    ("--orient-dpos", "orientation.dpos", float, "space-learning", "positive angle band (rad)"),
    ("--orient-dneg", "orientation.dneg", float, "space-learning", "negative angle margin (rad)"),
    ("--orient-top-n", "orientation.top_n", int, "space-learning", "angles averaged"),
    ("--energy", "shape.energy_fraction", float, "shape-model", "retained eigenvalue energy"),
    ("--n-modes", "shape.n_modes", int, "shape-model", "fixed number of modes K"),
    ("--group-threshold", "grouping.threshold", float, "shape-model", "aspect-ratio split"),
    ("--q", "shape.q", int, "shape-learning", "landmark patch side q"),
    ("--mode-top-n", "shape.top_n", int, "shape-learning", "mode weights averaged"),
    ("--pretrain-lr", "*.pretrain_lr", float, "nn-engine", "SdAE learning rate"),
    ("--finetune-lr", "*.finetune_lr", float, "nn-engine", "DNN learning rate"),
    ("--batch-size", "*.batch_size", int, "nn-engine", "mini-batch size"),
    ("--pretrain-epochs", "*.pretrain_epochs", int, "nn-engine", "SdAE epochs per layer"),
    ("--finetune-epochs", "*.finetune_epochs", int, "nn-engine", "DNN epochs"),
    ("--corruption", "*.corruption_rate", float, "nn-engine", "dAE masking fraction"),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _lookup(d, dotted):
    for part in dotted.split("."):
        d = d[part]
    return d


def _preset_value(preset, path):
    d = PRESETS[preset]().to_dict()
    if not path.startswith("*."):
        return _lookup(d, path)
    vals = [_lookup(d, f"{s}.net.{path[2:]}") for s in ("line", "orientation", "shape")]
    if len(set(vals)) == 1:
        return vals[0]
    return "/".join(map(str, vals)) + " (line/orientation/shape)"


def _overrides(args):
    out = {}
    for flag, path, _, _, _ in HYPERPARAMETERS:
        value = getattr(args, flag.lstrip("-").replace("-", "_"), None)
        if value is None:
            continue
        targets = ([f"{s}.net.{path[2:]}" for s in ("line", "orientation", "shape")]
                   if path.startswith("*.") else [path])
        for t in targets:
            node = out
            *head, last = t.split(".")
            for h in head:
                node = node.setdefault(h, {})
            node[last] = value
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        out["jobs"] = args.jobs
    return out


def effective_config(args):
    return load_config(args.preset, args.config, _overrides(args))


def _dims(text):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid dims {text!r}; use N or WxH") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 32:
        raise argparse.ArgumentTypeError(f"invalid dims {text!r}; need N or WxH with N >= 32")
    return tuple(vals)


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------

def cmd_synth(args):
    cfg = effective_config(args)
    dims = args.dims or tuple(cfg.image_dims)
    f = min(dims) / 256.0
    base = SyntheticSpec()
    spec = SyntheticSpec(
        count=args.count, dims=dims, n_landmarks=cfg.n_landmarks, seed=cfg.seed,
        group_heights=tuple((a * f, b * f) for a, b in base.group_heights),
        translation_jitter=base.translation_jitter * f, margin=base.margin * f,
        min_gap=base.min_gap * f, edge_blur=base.edge_blur * f, bit_depth=cfg.bit_depth)
    path = write_synthetic_dataset(generate_synthetic_dataset(spec), args.out)
    print(path)
    return EXIT_OK


def _training_data(manifest_path):
    manifest = DatasetManifest.load(manifest_path)
    images, shapes, entries = load_dataset(manifest, require_landmarks=True)
    missing = [e.image_path for e in entries if e.theta is None]
    if missing:
        raise ValueError(f"entries without an orientation 'theta': {missing[:5]}")
    return images, shapes, np.array([e.theta for e in entries])


def cmd_train(args):
    cfg = effective_config(args)
    images, shapes, thetas = _training_data(args.manifest)
    pixels = [im.pixels for im in images]
    seg = DeformableSegmenter(cfg)
    if args.stage == "space":
        seg.fit_space(pixels, shapes, thetas)
    elif args.stage == "shape":
        seg.fit_shape(pixels, shapes, thetas)
    else:
        seg.fit(pixels, shapes, thetas)
    out = seg.save(args.out)
    audits = {}
    if hasattr(seg, "space_"):
        audits.update(seg.space_.audits)
    if hasattr(seg, "modes_"):
        audits.update(seg.modes_.audits)
    _write_json(out / f"training_log_{args.stage}.json",
                {"stage": args.stage, "config": cfg.to_dict(), "n_images": len(pixels),
                 "networks": seg.training_log(), "audits": audits})
    print(out / "pipeline.json")
    return EXIT_OK


def _segment_inputs(args, bit_depth):
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        images, shapes, entries = load_dataset(manifest, require_landmarks=False)
        return [(e.image_path, im, s, e) for im, s, e in zip(images, shapes, entries)]
    return [(p, load_and_normalize(p, bit_depth), None, None) for p in args.images]


def cmd_segment(args):
    seg = DeformableSegmenter.load(args.model)
    cfg = seg._cfg()
    K = seg.modes_.K if args.modes is None else args.modes
    if K > min(m.n_modes for m in seg.models_.values()):
        raise MissingDetectorError(f"--modes {K} exceeds the shape models' mode count")
    seg.modes_.check(K)
    inputs = _segment_inputs(args, cfg.bit_depth)
    if not inputs:
        raise UsageError("no images given; pass image paths or --manifest")
    for path, img, _, _ in inputs:
        if tuple(seg.image_dims_) != img.dims:
            raise ValueError(f"image {path} is {img.width}x{img.height} but the detectors in "
                             f"{args.model} were trained on "
                             f"{seg.image_dims_[0]}x{seg.image_dims_[1]} images")
    out = Path(args.out)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    entries = []
    for path, img, gt, src in inputs:
        name = src.extra.get("name") if src is not None and "name" in src.extra else Path(path).stem
        res = seg.segment_image(img.pixels, K)
        space = {"T": list(res.space.T), "S": list(res.space.S), "theta": res.space.theta,
                 "lines": list(res.space.lines)}
        doc = {"image_path": os.path.relpath(path, out / "landmarks"), "n_modes": K,
               "group": res.group, "space": space, "weights": res.weights[:K].tolist(),
               "landmarks": res.shape.reshape(-1, 2).tolist()}
        _write_json(out / "landmarks" / f"{name}.json", doc)
        if args.mask or args.overlay:
            mask = rasterize_shape(res.shape, img.dims, cfg.n_parts, validate=False)
            if args.mask:
                (out / "masks").mkdir(exist_ok=True)
                save_mask(out / "masks" / f"{name}.pgm", mask)
            if args.overlay:
                (out / "overlays").mkdir(exist_ok=True)
                gt_mask = (np.zeros_like(mask) if gt is None
                           else rasterize_shape(gt, img.dims, cfg.n_parts, validate=False))
                write_overlay_png(out / "overlays" / f"{name}.png", img.pixels, gt_mask, mask)
        entries.append(ManifestEntry(
            image_path=os.path.relpath(path, out), landmarks=res.shape, group=res.group,
            spacing=tuple(img.spacing), bit_depth=img.bit_depth_source, theta=res.space.theta,
            extra={"name": name, "space": space, "n_modes": K}))
    DatasetManifest(entries, None, cfg.seed).save(out / "predictions.json")
    _write_json(out / "segment_config.json",
                {"model": os.path.relpath(args.model, out), "n_modes": K, "config": cfg.to_dict()})
    print(out / "predictions.json")
    return EXIT_OK


def _key(entry):
    return os.path.normpath(os.path.abspath(entry.image_path))


def cmd_eval(args):
    pred = DatasetManifest.load(args.pred)
    gt = DatasetManifest.load(args.gt)
    p_map = {_key(e): e for e in pred.entries}
    g_map = {_key(e): e for e in gt.entries}
    common = sorted(set(p_map) & set(g_map))
    if not common:
        raise ValueError("prediction and ground-truth manifests share no images")
    unmatched = sorted(set(p_map) ^ set(g_map))
    if unmatched and not args.allow_partial:
        listed = "\n  ".join(os.path.relpath(u) for u in unmatched)
        raise ValueError(f"{len(unmatched)} unmatched entries:\n  {listed}")
    cfg = effective_config(args)
    rows = []
    for i, key in enumerate(common):
        p, g = p_map[key], g_map[key]
        if p.landmarks is None or g.landmarks is None:
            raise ValueError(f"{key}: landmarks missing")
        img = load_and_normalize(g.image_path, g.bit_depth, g.spacing)
        row = {"index": i, "name": g.extra.get("name", Path(key).stem)}
        row.update(shape_scores(g.landmarks, p.landmarks, img.dims, g.spacing, cfg.n_parts))
        space = p.extra.get("space")
        if space is not None and g.theta is not None:
            row.update(space_errors(space["T"], space["S"], space["theta"], g.landmarks, g.theta,
                                    g.spacing))
        rows.append(row)
    report = EvalReport(rows, [], cfg.seed, {"config": cfg.to_dict()})
    report.extra["unmatched"] = [os.path.relpath(u) for u in unmatched]
    _, table_path = report.write(args.out)
    print(table_path.read_text(), end="")
    return EXIT_OK


def cmd_crossval(args):
    cfg = effective_config(args)
    images, shapes, thetas = _training_data(args.manifest)
    spacing = images[0].spacing
    report = crossval([im.pixels for im in images], shapes, thetas, cfg, args.folds, cfg.seed,
                      spacing)
    _, table_path = report.write(args.out)
    print(table_path.read_text(), end="")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _global_flags(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", metavar="PATH", default=default(None),
                        help="YAML or JSON file overriding the preset (default: none)")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=default("desk"),
                        help="built-in configuration (default: desk)")
    parser.add_argument("--seed", type=int, default=default(None),
                        help="random seed (default: the config's seed, 0)")
    parser.add_argument("--jobs", type=_positive, default=default(None),
                        help="worker cap (default: 1)")


def _hyperparameter_flags(parser):
    group = parser.add_argument_group("hyperparameters (override preset and config file)")
    for flag, path, typ, module, desc in HYPERPARAMETERS:
        paper = _preset_value("paper", path)
        desk = _preset_value("desk", path)
        group.add_argument(flag, type=typ, default=argparse.SUPPRESS, metavar=typ.__name__.upper(),
                           help=f"{desc} [{module}; paper preset {paper}, desk preset {desk}]")


def build_parser():
    parser = _Parser(prog="deformseg",
                     description="Learned space and shape segmentation of deformable objects.")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt,
                       help="write a synthetic benchmark dataset")
    p.add_argument("--count", type=_positive, default=100, help="number of images")
    p.add_argument("--dims", type=_dims, default=None,
                   help="image size N or WxH (default: the preset's image_dims)")
    p.add_argument("--out", default="synthetic", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="train detectors and shape models from a manifest")
    p.add_argument("manifest", help="dataset manifest with landmarks and theta")
    p.add_argument("--stage", choices=("space", "shape", "all"), default="all",
                   help="which detectors to train")
    p.add_argument("--out", default="model", help="bundle directory")
    _hyperparameter_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], formatter_class=fmt,
                       help="segment images with a trained bundle")
    p.add_argument("images", nargs="*", help="image files (PGM or PNG)")
    p.add_argument("--manifest", default=None, help="segment every image of a manifest")
    p.add_argument("--model", required=True, help="bundle directory written by train")
    p.add_argument("--modes", type=_non_negative, default=None,
                   help="number of shape modes; 0 places the mean shape, None uses all")
    p.add_argument("--mask", action="store_true", help="also write binary mask PGMs")
    p.add_argument("--overlay", action="store_true",
                   help="also write overlay PNGs (truth green, result red, overlap blue)")
    p.add_argument("--out", default="segmentation", help="output directory")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt,
                       help="score predictions against ground truth")
    p.add_argument("pred", help="predictions manifest written by segment")
    p.add_argument("gt", help="ground-truth manifest")
    p.add_argument("--out", default="evaluation", help="report directory")
    p.add_argument("--allow-partial", action="store_true",
                   help="score the matched images even when some entries are unmatched")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", parents=[common], formatter_class=fmt,
                       help="k-fold train/test on one manifest")
    p.add_argument("manifest", help="dataset manifest with landmarks and theta")
    p.add_argument("--folds", type=int, default=2, help="number of folds")
    p.add_argument("--out", default="crossval", help="report directory")
    _hyperparameter_flags(p)
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"deformseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError, ArithmeticError) as exc:
        print(f"deformseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DeformsegError, OSError, ValueError, KeyError, LookupError, TypeError) as exc:
        print(f"deformseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
