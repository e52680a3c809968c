"""Marginal space learning of the box (four lines) and its orientation.

Four line detectors each score every integer position of one bounding line
(1 top, 2 bottom, 3 left, 4 right) from a strip of ``2r + 1`` rows (or
columns) spanning the whole image. The box follows from the four lines. A fifth
detector scores fixed-size crops of the box rotated by a hypothesised angle.
Every detection is the plain average of the ``top_n`` best-scoring hypotheses.

Detectors are :class:`~deformseg.nn.NetworkModel` instances, or any callable
``f(features, hypotheses) -> scores`` (handy for tests and baselines).
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from sklearn.base import BaseEstimator

from ._validation import as_image, as_shape_vector
from .config import LineConfig, OrientationConfig
from .data import AugmentConfig, IntensityPCA, augment, flip_shape
from .exceptions import DegenerateInputError, DimensionError, MissingDetectorError
from .nn import NetworkModel, TrainConfig, dnn_logit, train_detector, train_dnn
from .shape_model import SpaceParams, bounding_lines

log = logging.getLogger(__name__)

LINE_NAMES = {1: "top", 2: "bottom", 3: "left", 4: "right"}
# reversing a strip across its thin axis turns line i into MIRROR_LINE[i]
MIRROR_LINE = {1: 2, 2: 1, 3: 4, 4: 3}
BUNDLE_VERSION = 1
_CHUNK = 256


def _check_line(line):
    if line not in LINE_NAMES:
        raise ValueError(f"line index must be 1..4, got {line}")


def _oriented(px, line):
    """Image with the scanned axis first: rows for lines 1-2, columns for 3-4."""
    return px if line in (1, 2) else px.T


def axis_length(image, line):
    px = as_image(image)
    return _oriented(px, line).shape[0]


def line_strips(image, line, r, positions=None):
    """Flattened ``(2r+1) x N`` strips centred on integer ``positions``.

    Rows beyond the image repeat the edge row. The thin axis comes first so a
    strip reversed along it is the matching strip of the mirrored line.
    """
    _check_line(line)
    px = _oriented(as_image(image), line)
    L = px.shape[0]
    if L < 2 * r + 1:
        raise DimensionError(f"image axis of {L} px is shorter than a {2 * r + 1}-px strip")
    pos = np.arange(L) if positions is None else np.asarray(positions, dtype=int)
    if pos.size and (pos.min() < 0 or pos.max() >= L):
        raise ValueError("strip position outside the image")
    padded = np.pad(px, ((r, r), (0, 0)), mode="edge")
    windows = sliding_window_view(padded, 2 * r + 1, axis=0)  # (L, N, 2r+1)
    return np.ascontiguousarray(windows[pos].transpose(0, 2, 1)).reshape(len(pos), -1)


def label_offset(offset, pos_tol=1.0, neg_min=5.0):
    """1 inside the positive band, 0 beyond the negative margin, ``None`` between."""
    d = abs(float(offset))
    if d <= pos_tol:
        return 1
    if d >= neg_min:
        return 0
    return None


@dataclass
class Hypotheses:
    """Feature rows, binary labels and the hypothesised values they encode."""

    X: np.ndarray
    y: np.ndarray
    values: np.ndarray
    truth: np.ndarray

    def __len__(self):
        return len(self.y)

    @staticmethod
    def concat(items):
        items = [h for h in items if len(h)]
        if not items:
            raise DegenerateInputError("no hypotheses")
        return Hypotheses(np.vstack([h.X for h in items]), np.concatenate([h.y for h in items]),
                          np.concatenate([h.values for h in items]),
                          np.concatenate([h.truth for h in items]))


def extract_line_hypotheses(image, gt_position, line, r=7, pos_tol=1.0, neg_min=5.0,
                            neg_multiple=3, rng=None, near_fraction=0.0, near_width=15.0):
    """Labelled strips around a ground-truth line position.

    Positives are the integer positions within ``pos_tol`` of the truth,
    negatives those at least ``neg_min`` away, subsampled uniformly (without
    replacement) to ``neg_multiple`` times the positive count. A non-zero
    ``near_fraction`` draws that share of the negatives from offsets in
    ``[neg_min, neg_min + near_width]`` instead.
    """
    L = axis_length(image, line)
    if not 0 <= gt_position <= L - 1:
        raise ValueError(f"line position {gt_position} outside [0, {L - 1}]")
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0, 1]")
    pos_all = np.arange(L)
    off = np.abs(pos_all - float(gt_position))
    pos = pos_all[off <= pos_tol]
    neg = pos_all[off >= neg_min]
    if rng is None:
        rng = np.random.default_rng(0)
    n_neg = min(len(neg), neg_multiple * len(pos))
    near = neg[off[neg] <= neg_min + near_width]
    n_near = min(len(near), int(round(near_fraction * n_neg)))
    picked = rng.choice(near, size=n_near, replace=False) if n_near else near[:0]
    rest = np.setdiff1d(neg, picked)
    n_rest = min(len(rest), n_neg - n_near)
    extra = rng.choice(rest, size=n_rest, replace=False) if n_rest else rest[:0]
    neg = np.sort(np.concatenate([picked, extra]))
    chosen = np.concatenate([pos, neg])
    X = line_strips(image, line, r, chosen)
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return Hypotheses(X, y, chosen.astype(float), np.full(len(chosen), float(gt_position)))


def audit_partition(hyp: Hypotheses, pos_tol, neg_min, what="hypotheses", scale=1.0):
    """Raise if any positive lies outside the positive band or any negative
    inside the negative margin. ``scale`` converts offsets to band units."""
    off = np.abs(hyp.values - hyp.truth) / scale
    bad_pos = np.sum((hyp.y == 1) & (off > pos_tol + 1e-9))
    bad_neg = np.sum((hyp.y == 0) & (off < neg_min - 1e-9))
    if bad_pos or bad_neg:
        raise AssertionError(f"{what}: {bad_pos} positives and {bad_neg} negatives violate the bands")
    return {"n": int(len(hyp)), "positives": int(hyp.y.sum()),
            "negatives": int(len(hyp) - hyp.y.sum()),
            "max_pos_offset": float(off[hyp.y == 1].max()) if hyp.y.any() else None,
            "min_neg_offset": float(off[hyp.y == 0].min()) if (hyp.y == 0).any() else None}


def score_hypotheses(detector, X, values):
    """Detector scores for feature rows (network logits, or a callable's output)."""
    if detector is None:
        raise MissingDetectorError("detector not trained")
    if isinstance(detector, NetworkModel):
        return np.atleast_1d(dnn_logit(detector, X))
    scores = np.asarray(detector(X, values), dtype=np.float64).reshape(-1)
    if scores.shape[0] != len(values):
        raise DimensionError("detector returned the wrong number of scores")
    return scores


def top_n_average(values, scores, top_n):
    """Mean of the values with the ``top_n`` highest scores; ties favour earlier values.

    Returns ``(estimate, flat)`` where ``flat`` flags constant scores.
    """
    values = np.asarray(values, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DegenerateInputError("detector produced non-finite scores")
    if np.ptp(scores) == 0:
        return None, True
    order = np.lexsort((np.arange(len(values)), -scores))
    return float(values[order[:min(top_n, len(values))]].mean()), False


def detect_line(detector, image, line, r=7, top_n=10, window=None):
    """Position of one bounding line: average of the ``top_n`` best integer positions.

    ``window=(lo, hi)`` limits the search to integer positions in ``[lo, hi]``;
    flat scores fall back to the middle of the searched range.
    """
    L = axis_length(image, line)
    positions = np.arange(L)
    if window is not None:
        lo, hi = max(0, math.ceil(window[0])), min(L - 1, math.floor(window[1]))
        if hi < lo:
            raise DegenerateInputError(f"empty search window {window} for line {line}")
        positions = positions[lo:hi + 1]
    scores = _line_scores(detector, image, line, r, positions)
    est, flat = top_n_average(positions, scores, top_n)
    if flat:
        warnings.warn(f"line {line} detector scores are flat; using the middle of the search range",
                      RuntimeWarning, stacklevel=2)
        return (positions[0] + positions[-1]) / 2.0
    return est


def learn_search_windows(shapes, dims, margin, flips=()):
    """Per-line ``(lo, hi)`` ranges covering the training lines plus a margin.

    ``margin`` is a fraction of the axis length. Mirrored copies of the shapes
    are included for each flip in ``flips`` so the windows match the
    augmented training set.
    """
    if margin is None:
        return {}
    if margin < 0:
        raise ValueError("search margin must be non-negative")
    w, h = dims
    shps = [as_shape_vector(s) for s in shapes]
    for axis in flips:
        shps += [flip_shape(s, dims, axis, reorder=False) for s in shps]
    lines = np.array([bounding_lines(s) for s in shps])
    windows = {}
    for i in (1, 2, 3, 4):
        pad = margin * (h if i <= 2 else w)
        windows[i] = (float(lines[:, i - 1].min() - pad), float(lines[:, i - 1].max() + pad))
    return windows


def derive_box(l1, l2, l3, l4):
    """Box centre ``T`` and extent ``S`` from top, bottom, left and right lines."""
    if not l2 > l1 or not l4 > l3:
        raise DegenerateInputError(f"inverted or empty box: top={l1} bottom={l2} left={l3} right={l4}")
    return (0.5 * (l3 + l4), 0.5 * (l1 + l2)), (l4 - l3, l2 - l1)


def box_of_shape(shape):
    l1, l2, l3, l4 = bounding_lines(shape)
    return derive_box(l1, l2, l3, l4)


# --- orientation --------------------------------------------------------------

def _prefilter(image):
    return ndimage.spline_filter(as_image(image), order=3, output=np.float64)


def crop_rotated_box(image, T, S, thetas, size=64, margin=1.0, prefiltered=None):
    """Bicubic ``size x size`` crops of the box ``(T, S)`` rotated by each angle.

    Returns ``(len(thetas), size * size)``. Pass ``prefiltered`` (from
    ``scipy.ndimage.spline_filter``) to reuse spline coefficients.
    """
    coeffs = _prefilter(image) if prefiltered is None else prefiltered
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    g = ((np.arange(size) + 0.5) / size - 0.5) * margin
    u, v = np.meshgrid(g * S[0], g * S[1])
    local = np.stack([u.ravel(), v.ravel()])  # (2, P)
    c, s = np.cos(thetas), np.sin(thetas)
    xs = T[0] + c[:, None] * local[0] - s[:, None] * local[1]
    ys = T[1] + s[:, None] * local[0] + c[:, None] * local[1]
    out = ndimage.map_coordinates(coeffs, [ys.ravel(), xs.ravel()], order=3, mode="nearest",
                                  prefilter=False)
    return out.reshape(len(thetas), size * size)


def orientation_grid(range_=0.26, step=0.0017):
    """Symmetric scan grid ``step * j`` for ``|j| <= floor(range / step)``."""
    if step <= 0 or range_ < 0:
        raise ValueError("step must be positive and range non-negative")
    n = int(math.floor(range_ / step + 1e-9))
    return step * np.arange(-n, n + 1)


def label_angle(delta, dpos=0.017, dneg=0.034):
    return label_offset(delta, dpos, dneg)


def extract_orientation_hypotheses(image, T, S, gt_theta, cfg: OrientationConfig, rng=None,
                                   prefiltered=None):
    """Crops at angles within ``dpos`` of the truth (evenly spaced) and random
    angles in the scan range at least ``dneg`` away."""
    if rng is None:
        rng = np.random.default_rng(0)
    pos = gt_theta + np.linspace(-cfg.dpos, cfg.dpos, cfg.n_pos)
    lo, hi = -cfg.range, cfg.range
    neg = []
    while len(neg) < cfg.n_neg:
        cand = rng.uniform(lo, hi, size=4 * cfg.n_neg)
        neg.extend(cand[np.abs(cand - gt_theta) >= cfg.dneg].tolist())
    neg = np.asarray(neg[:cfg.n_neg])
    thetas = np.concatenate([pos, neg])
    X = crop_rotated_box(image, T, S, thetas, cfg.crop_size, cfg.crop_margin, prefiltered)
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return Hypotheses(X, y, thetas, np.full(len(thetas), float(gt_theta)))


def detect_orientation(detector, image, T, S, cfg: OrientationConfig, prefiltered=None):
    grid = orientation_grid(cfg.range, cfg.step)
    X = crop_rotated_box(image, T, S, grid, cfg.crop_size, cfg.crop_margin, prefiltered)
    scores = score_hypotheses(detector, X, grid)
    est, flat = top_n_average(grid, scores, cfg.top_n)
    if flat:
        warnings.warn("orientation scores are flat; using 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return est


# --- detector set -------------------------------------------------------------

@dataclass
class SpaceEstimate:
    """Detected lines, box and orientation of one image."""

    lines: tuple
    T: tuple
    S: tuple
    theta: float

    @property
    def box_params(self):
        """Box-level parameters: ``T`` box centre, ``S`` box extent, ``theta``."""
        return SpaceParams(T=self.T, theta=self.theta, S=self.S)


@dataclass
class SpaceDetectorSet:
    lines: dict = field(default_factory=dict)
    orientation: object = None
    line_cfg: LineConfig = field(default_factory=LineConfig)
    orient_cfg: OrientationConfig = field(default_factory=OrientationConfig)
    image_dims: tuple | None = None
    bit_depth: int = 12
    audits: dict = field(default_factory=dict)
    windows: dict = field(default_factory=dict)

    def line_detector(self, line):
        _check_line(line)
        if line not in self.lines or self.lines[line] is None:
            raise MissingDetectorError(f"no detector for line {line} ({LINE_NAMES[line]})")
        return self.lines[line]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for i in (1, 2, 3, 4):
            det = self.line_detector(i)
            if not isinstance(det, NetworkModel):
                raise TypeError("only trained networks can be saved")
            det.save(out / f"line{i}.json")
            files[f"line{i}"] = f"line{i}.json"
        if not isinstance(self.orientation, NetworkModel):
            raise MissingDetectorError("orientation detector missing")
        self.orientation.save(out / "orientation.json")
        files["orientation"] = "orientation.json"
        manifest = {
            "version": BUNDLE_VERSION, "files": files,
            "r": self.line_cfg.r, "top_n": self.line_cfg.top_n,
            "step": self.orient_cfg.step, "range": self.orient_cfg.range,
            "orientation_top_n": self.orient_cfg.top_n, "crop_size": self.orient_cfg.crop_size,
            "crop_margin": self.orient_cfg.crop_margin,
            "image_dims": None if self.image_dims is None else list(self.image_dims),
            "normalization": {"bit_depth": self.bit_depth, "range": [0.0, 1.0]},
            "audits": self.audits,
            "search_windows": {str(k): list(v) for k, v in self.windows.items()},
        }
        (out / "space_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, in_dir):
        d = Path(in_dir)
        path = d / "space_manifest.json"
        if not path.exists():
            raise MissingDetectorError(f"{path} not found")
        m = json.loads(path.read_text())
        lines = {}
        for i in (1, 2, 3, 4):
            f = d / m["files"].get(f"line{i}", f"line{i}.json")
            if not f.exists():
                raise MissingDetectorError(f"missing detector file {f}")
            lines[i] = NetworkModel.load(f)
        of = d / m["files"].get("orientation", "orientation.json")
        if not of.exists():
            raise MissingDetectorError(f"missing detector file {of}")
        line_cfg = LineConfig(r=m["r"], top_n=m["top_n"])
        orient_cfg = OrientationConfig(step=m["step"], range=m["range"], top_n=m["orientation_top_n"],
                                       crop_size=m["crop_size"], crop_margin=m["crop_margin"])
        dims = m.get("image_dims")
        windows = {int(k): tuple(v) for k, v in m.get("search_windows", {}).items()}
        return cls(lines, NetworkModel.load(of), line_cfg, orient_cfg,
                   None if dims is None else tuple(dims), m["normalization"]["bit_depth"],
                   m.get("audits", {}), windows)


def estimate_space(image, detectors: SpaceDetectorSet, order=(1, 2, 3, 4)):
    """Detect the four lines (in any order), derive the box, then the orientation."""
    px = as_image(image)
    if detectors.image_dims is not None and tuple(detectors.image_dims) != (px.shape[1], px.shape[0]):
        raise DimensionError(f"image is {px.shape[1]}x{px.shape[0]}, detectors expect "
                             f"{detectors.image_dims[0]}x{detectors.image_dims[1]}")
    if sorted(order) != [1, 2, 3, 4]:
        raise ValueError("order must be a permutation of 1..4")
    found = {}
    for i in order:
        found[i] = detect_line(detectors.line_detector(i), px, i, detectors.line_cfg.r,
                               detectors.line_cfg.top_n, detectors.windows.get(i))
    lines = tuple(found[i] for i in (1, 2, 3, 4))
    T, S = derive_box(*lines)
    if detectors.orientation is None:
        raise MissingDetectorError("orientation detector missing")
    theta = detect_orientation(detectors.orientation, px, T, S, detectors.orient_cfg)
    return SpaceEstimate(lines, T, S, theta)


# --- training -----------------------------------------------------------------

def _augmented(images, shapes, thetas, flips, intensity_copies, pca, seed, n_parts):
    cfg = AugmentConfig(flips=tuple(flips), intensity_copies=intensity_copies, seed=seed)
    extras = [{"theta": float(t)} for t in thetas]
    imgs, shps, origin, ext = augment(images, shapes, cfg, pca, n_parts, extras)
    return imgs, shps, [e["theta"] for e in ext], origin


def _line_scores(detector, image, line, r, positions=None):
    if positions is None:
        positions = np.arange(axis_length(image, line))
    L = len(positions)
    return np.concatenate([
        score_hypotheses(detector, line_strips(image, line, r, positions[s:s + _CHUNK]),
                         positions[s:s + _CHUNK].astype(float))
        for s in range(0, L, _CHUNK)])


def mine_hard_negatives(detector, images, truths, line, cfg: LineConfig):
    """Top-scoring positions at least ``neg_min`` from the truth, per image."""
    hyps = []
    for im, gt in zip(images, truths):
        scores = _line_scores(detector, im, line, cfg.r)
        far = np.flatnonzero(np.abs(np.arange(len(scores)) - gt) >= cfg.neg_min)
        worst = far[np.argsort(-scores[far], kind="stable")[:cfg.hard_per_image]]
        worst = np.sort(worst)
        hyps.append(Hypotheses(line_strips(im, line, cfg.r, worst), np.zeros(len(worst)),
                               worst.astype(float), np.full(len(worst), float(gt))))
    return Hypotheses.concat(hyps)


def train_line_detectors(images, shapes, cfg: LineConfig, seed=0, augment_copies=1, pca=None,
                         n_parts=2, thetas=None):
    """Train the four line detectors; returns ``(detectors, audits)``."""
    thetas = np.zeros(len(images)) if thetas is None else thetas
    imgs, shps, _, _ = _augmented(images, shapes, thetas, cfg.flips, augment_copies, pca, seed, n_parts)
    rng = np.random.default_rng([seed, 11])
    detectors, audits = {}, {}
    for line in (1, 2, 3, 4):
        truths = [bounding_lines(s)[line - 1] for s in shps]
        h = Hypotheses.concat([
            extract_line_hypotheses(im, gt, line, cfg.r, cfg.pos_tol, cfg.neg_min, cfg.neg_multiple,
                                    rng, cfg.near_fraction, cfg.near_width)
            for im, gt in zip(imgs, truths)])
        audit = audit_partition(h, cfg.pos_tol, cfg.neg_min, f"line {line}")
        log.info("line %d: training on %d hypotheses", line, len(h))
        det = train_detector(h.X, h.y, cfg.net, seed=seed + 100 * line)
        pool = []
        for rnd in range(cfg.hard_rounds):
            pool.append(mine_hard_negatives(det, imgs, truths, line, cfg))
            hard = Hypotheses.concat(pool)
            audit[f"hard_round{rnd + 1}"] = audit_partition(hard, cfg.pos_tol, cfg.neg_min,
                                                            f"line {line} hard negatives")
            X, y = np.vstack([h.X, hard.X]), np.concatenate([h.y, hard.y])
            fine = TrainConfig(cfg.net.finetune_lr, cfg.net.batch_size, cfg.net.finetune_epochs, 0.0,
                               seed + 100 * line + 10 * (rnd + 1))
            det = train_dnn(det, X, y, fine, rebalance=True)
        audits[f"line{line}"] = audit
        detectors[line] = det
    return detectors, audits


def train_orientation_detector(images, shapes, thetas, cfg: OrientationConfig, seed=0,
                               augment_copies=1, pca=None, n_parts=2, box_jitter=0.0):
    """Train the orientation detector on crops of the ground-truth boxes."""
    imgs, shps, ths, _ = _augmented(images, shapes, thetas, cfg.flips, augment_copies, pca, seed,
                                    n_parts)
    rng = np.random.default_rng([seed, 13])
    hyps = []
    for im, s, th in zip(imgs, shps, ths):
        T, S = box_of_shape(s)
        if box_jitter > 0:
            T = tuple(np.asarray(T) + rng.uniform(-box_jitter, box_jitter, 2))
            S = tuple(np.asarray(S) + rng.uniform(-box_jitter, box_jitter, 2))
        hyps.append(extract_orientation_hypotheses(im, T, S, th, cfg, rng))
    h = Hypotheses.concat(hyps)
    audit = audit_partition(h, cfg.dpos, cfg.dneg, "orientation")
    log.info("orientation: training on %d hypotheses", len(h))
    return train_detector(h.X, h.y, cfg.net, seed=seed + 700), audit


class SpaceEstimator(BaseEstimator):
    """Estimator wrapper around the five space detectors.

    ``fit(images, shapes, thetas)`` trains them from landmark shapes and the
    ground-truth orientation of each image; ``predict`` returns one
    :class:`SpaceEstimate` per image.
    """

    def __init__(self, line_cfg=None, orient_cfg=None, intensity_copies=1, n_parts=2,
                 random_state=0):
        self.line_cfg = line_cfg
        self.orient_cfg = orient_cfg
        self.intensity_copies = intensity_copies
        self.n_parts = n_parts
        self.random_state = random_state

    def fit(self, images, shapes, thetas):
        line_cfg = self.line_cfg or LineConfig()
        orient_cfg = self.orient_cfg or OrientationConfig()
        imgs = [as_image(im) for im in images]
        shps = [as_shape_vector(s) for s in shapes]
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1)
        if not (len(imgs) == len(shps) == len(thetas)) or not imgs:
            raise DimensionError("images, shapes and thetas must be non-empty and equally long")
        seed = int(self.random_state or 0)
        pca = None
        if self.intensity_copies:
            pca = IntensityPCA().fit(imgs)
        lines, audits = train_line_detectors(imgs, shps, line_cfg, seed, self.intensity_copies, pca,
                                             self.n_parts, thetas)
        orient, audits["orientation"] = train_orientation_detector(
            imgs, shps, thetas, orient_cfg, seed, self.intensity_copies, pca, self.n_parts)
        h, w = imgs[0].shape
        windows = learn_search_windows(shps, (w, h), line_cfg.search_margin, line_cfg.flips)
        self.detectors_ = SpaceDetectorSet(lines, orient, line_cfg, orient_cfg, (w, h), audits=audits,
                                           windows=windows)
        return self

    def predict(self, images):
        return [estimate_space(im, self.detectors_) for im in images]
