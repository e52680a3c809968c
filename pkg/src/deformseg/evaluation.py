"""Per-image scoring, two-fold cross-validation and the mean-shape comparison."""
from __future__ import annotations

import logging

import numpy as np
from scipy import stats

from ._validation import as_image, as_shape_vector
from .config import PipelineConfig
from .data import rasterize_shape
from .exceptions import DimensionError
from .metrics import EvalReport, acd_shapes, dsc, jaccard
from .pipeline import DeformableSegmenter
from .space import box_of_shape
from .shape_model import wrap_angle

log = logging.getLogger(__name__)


def fold_assignment(n, folds=2, seed=0):
    """Seeded random partition of ``range(n)`` into ``folds`` near-equal folds."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise ValueError(f"{folds} folds requested for {n} samples")
    perm = np.random.default_rng([seed, 29]).permutation(n)
    out = np.empty(n, dtype=int)
    for f, idx in enumerate(np.array_split(perm, folds)):
        out[idx] = f
    return out


def space_errors(T, S, theta, gt_shape, gt_theta, spacing=(1.0, 1.0)):
    """Translation (box centre distance), scale (mean absolute box-extent error)
    and orientation errors of a detected box against the landmark box."""
    T_gt, S_gt = box_of_shape(gt_shape)
    d = np.subtract(T, T_gt)
    sp = np.asarray(spacing, dtype=np.float64)
    return {
        "translation_px": float(np.hypot(*d)),
        "translation_mm": float(np.hypot(*(d * sp))),
        "scale_px": float(np.mean(np.abs(np.subtract(S, S_gt)))),
        "orientation_rad": float(abs(wrap_angle(theta - gt_theta))),
    }


def shape_scores(gt_shape, seg_shape, dims, spacing=(1.0, 1.0), n_parts=2):
    """DSC, Jaccard and ACD (mm) of a predicted landmark shape against the truth."""
    gt_mask = rasterize_shape(gt_shape, dims, n_parts, validate=False)
    seg_mask = rasterize_shape(seg_shape, dims, n_parts, validate=False)
    return {"dsc": dsc(gt_mask, seg_mask), "jaccard": jaccard(gt_mask, seg_mask),
            "acd_mm": acd_shapes(gt_shape, seg_shape, spacing, n_parts)}


def paired_wilcoxon(better, worse):
    """One-sided paired signed-rank test that ``better`` exceeds ``worse``."""
    a = np.asarray(better, dtype=np.float64)
    b = np.asarray(worse, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise DimensionError("need two paired samples of equal length >= 2")
    if np.all(a == b):
        return 1.0
    return float(stats.wilcoxon(a, b, alternative="greater").pvalue)


def evaluate_fold(segmenter: DeformableSegmenter, images, shapes, thetas, indices, fold,
                  spacing=(1.0, 1.0), n_parts=2):
    rows = []
    for img, shape, theta, idx in zip(images, shapes, thetas, indices):
        px = as_image(img)
        dims = (px.shape[1], px.shape[0])
        res = segmenter.segment_image(px)
        row = {"index": int(idx), "fold": int(fold), "group": int(res.group)}
        row.update(shape_scores(shape, res.shape, dims, spacing, n_parts))
        row.update(space_errors(res.space.T, res.space.S, res.space.theta, shape, theta, spacing))
        row["dsc_by_modes"] = [shape_scores(shape, st, dims, spacing, n_parts)["dsc"]
                               for st in res.stages]
        row["mean_shape_dsc"] = row["dsc_by_modes"][0]
        rows.append(row)
    return rows


def crossval(images, shapes, thetas, config: PipelineConfig | None = None, folds=2, seed=0,
             spacing=(1.0, 1.0)):
    """Train on all folds but one, test on the held-out fold, for every fold.

    The report carries per-image metrics, the fold assignment, the mean DSC
    per number of modes, the one-sided paired test of the full pipeline
    against the placed mean shape and each fold's hypothesis audits.
    """
    imgs = [as_image(im) for im in images]
    shps = np.vstack([as_shape_vector(s) for s in shapes])
    thetas = np.asarray(thetas, dtype=np.float64)
    if not len(imgs) == len(shps) == len(thetas):
        raise DimensionError("images, shapes and thetas differ in length")
    assign = fold_assignment(len(imgs), folds, seed)
    rows, audits = [], {}
    for f in range(folds):
        train = np.flatnonzero(assign != f)
        test = np.flatnonzero(assign == f)
        log.info("fold %d: training on %d images", f, len(train))
        seg = DeformableSegmenter(config).fit([imgs[i] for i in train], shps[train], thetas[train])
        audits[f"fold{f}"] = {**seg.space_.audits, **seg.modes_.audits}
        n_parts = seg._cfg().n_parts
        rows += evaluate_fold(seg, [imgs[i] for i in test], shps[test], thetas[test], test, f,
                              spacing, n_parts)
    rows.sort(key=lambda r: r["index"])
    report = build_report(rows, assign, seed, config)
    report.extra["training_audits"] = audits
    return report


def build_report(rows, assign, seed, config=None):
    by_k = np.array([r["dsc_by_modes"] for r in rows])
    full = np.array([r["dsc"] for r in rows])
    base = np.array([r["mean_shape_dsc"] for r in rows])
    try:
        p = paired_wilcoxon(full, base)
    except (DimensionError, ValueError):
        p = None
    extra = {
        "fold_assignment": [int(a) for a in assign],
        "mean_dsc_by_modes": [float(v) for v in by_k.mean(axis=0)],
        "mean_shape_vs_full": {"mean_shape_dsc": float(base.mean()), "full_dsc": float(full.mean()),
                               "wilcoxon_p": p},
    }
    if config is not None:
        extra["config"] = config.to_dict()
    folds = sorted({int(a) for a in assign})
    return EvalReport(rows, folds, seed, extra)


def non_decreasing(values, tol=0.0):
    v = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.diff(v) >= -tol))
