"""Overlap and contour-distance metrics plus report aggregation."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .data import shape_parts
from .exceptions import DegenerateInputError, DimensionError


def _masks(gt, seg):
    gt = np.asarray(gt, dtype=bool)
    seg = np.asarray(seg, dtype=bool)
    if gt.shape != seg.shape:
        raise DimensionError(f"mask shapes differ: {gt.shape} vs {seg.shape}")
    return gt, seg


def dsc(gt_mask, seg_mask):
    """Dice coefficient ``2|GT & SEG| / (|GT| + |SEG|)``; two empty masks score 1."""
    gt, seg = _masks(gt_mask, seg_mask)
    total = int(gt.sum()) + int(seg.sum())
    if total == 0:
        warnings.warn("DSC of two empty masks is defined as 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return 2.0 * int(np.logical_and(gt, seg).sum()) / total


def jaccard(gt_mask, seg_mask):
    """Overlap ``|GT & SEG| / |GT | SEG|``; two empty masks score 1."""
    gt, seg = _masks(gt_mask, seg_mask)
    union = int(np.logical_or(gt, seg).sum())
    if union == 0:
        warnings.warn("Jaccard index of two empty masks is defined as 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return int(np.logical_and(gt, seg).sum()) / union


def mask_boundary(mask):
    """``(K, 2)`` array of ``(x, y)`` for foreground pixels with a 4-neighbour outside."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    ys, xs = np.nonzero(m & ~interior)
    return np.column_stack([xs, ys]).astype(np.float64)


def _scaled(points, spacing):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sp = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (2,))
    return pts * sp


def acd(gt_contour, seg_contour, spacing=1.0):
    """Average contour distance between two point sets, in physical units.

    ``0.5 * (mean_{p in SEG} d(p, GT) + mean_{p in GT} d(p, SEG))`` with ``d`` the
    distance to the nearest point of the other set.
    """
    gt = _scaled(gt_contour, spacing)
    seg = _scaled(seg_contour, spacing)
    if len(gt) == 0 or len(seg) == 0:
        raise DegenerateInputError("ACD needs two non-empty contours")
    d_seg = cKDTree(gt).query(seg)[0]
    d_gt = cKDTree(seg).query(gt)[0]
    return 0.5 * (float(d_seg.mean()) + float(d_gt.mean()))


def densify_polyline(points, factor=4, closed=True):
    """Insert ``factor - 1`` evenly spaced points on every edge."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    nxt = np.roll(pts, -1, axis=0) if closed else pts[1:]
    base = pts if closed else pts[:-1]
    t = np.arange(factor)[None, :, None] / factor
    dense = base[:, None, :] + t * (nxt - base)[:, None, :]
    out = dense.reshape(-1, 2)
    return out if closed else np.vstack([out, pts[-1:]])


def _point_to_polyline(points, poly):
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab[None], axis=2) / denom[None], 0.0, 1.0)
    diff = ap - t[..., None] * ab[None]
    return np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))


def acd_shapes(gt_shape, seg_shape, spacing=1.0, n_parts=2, density=4):
    """ACD between landmark contours: each side is resampled ``density`` times
    and distances are measured to the other shape's closed polylines."""
    gt_parts = [_scaled(p, spacing) for p in shape_parts(gt_shape, n_parts)]
    seg_parts = [_scaled(p, spacing) for p in shape_parts(seg_shape, n_parts)]

    def one_way(src_parts, dst_parts):
        pts = np.vstack([densify_polyline(p, density) for p in src_parts])
        d = np.min(np.stack([_point_to_polyline(pts, q) for q in dst_parts]), axis=0)
        return d

    d_seg = one_way(seg_parts, gt_parts)
    d_gt = one_way(gt_parts, seg_parts)
    return 0.5 * (float(d_seg.mean()) + float(d_gt.mean()))


def pearson_r(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        raise DimensionError("need two equal-length sequences of at least two values")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if na == 0 or nb == 0:
        raise DegenerateInputError("zero variance")
    return float(np.clip(np.sum(da * db) / (na * nb), -1.0, 1.0))


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "min": None, "max": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}


METRIC_COLUMNS = ("jaccard", "acd_mm", "dsc", "translation_px", "translation_mm",
                  "scale_px", "orientation_rad")


@dataclass
class EvalReport:
    per_image: list
    folds: list = field(default_factory=list)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def metric_values(self, name, fold=None):
        return [r[name] for r in self.per_image
                if r.get(name) is not None and (fold is None or r.get("fold") == fold)]

    @property
    def aggregates(self):
        names = [m for m in METRIC_COLUMNS if any(m in r for r in self.per_image)]
        out = {"pooled": {m: summarize(self.metric_values(m)) for m in names}}
        for f in sorted({r.get("fold") for r in self.per_image if r.get("fold") is not None}):
            out[f"fold{f}"] = {m: summarize(self.metric_values(m, f)) for m in names}
        return out

    def to_dict(self):
        return {"seed": self.seed, "folds": self.folds, "per_image": self.per_image,
                "aggregates": self.aggregates, **self.extra}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self):
        """Aligned text table, one row per metric: ``Mean+-Std (Min/Max)``."""
        agg = self.aggregates["pooled"]
        rows = [("Metric", "Mean±Standard Deviation (Min/Max)", "N")]
        for name, s in agg.items():
            if s["n"] == 0:
                continue
            rows.append((name, f"{s['mean']:.4f}±{s['std']:.4f} ({s['min']:.4f}/{s['max']:.4f})",
                         str(s["n"])))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        (out_dir / f"{stem}.txt").write_text(self.to_table())
        return out_dir / f"{stem}.json", out_dir / f"{stem}.txt"
