"""Marginal shape learning: one detector per PCA mode, applied in order.

Starting from the mean shape placed by the space parameters, mode ``k`` is
found by scanning its weight over ``[-3, 3]`` standard deviations, scoring the
patch vector of each candidate shape and averaging the best ``top_n``
weights. Later modes are estimated on top of the earlier ones, so the order
is fixed: :class:`MarginalShapeEstimator` refuses out-of-order steps.

Weights handed to and returned from the public functions are in the model's
own units unless a name says ``units`` (standard deviations ``sqrt(lambda)``).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import as_image, as_shape_vector
from .config import ShapeConfig
from .exceptions import DegenerateInputError, DimensionError, MissingDetectorError
from .nn import NetworkModel, train_detector
from .shape_model import ShapeModel, SpaceParams, project_shape, synthesize_shape
from .space import Hypotheses, audit_partition, score_hypotheses, top_n_average

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class OrderError(RuntimeError):
    """A mode was requested before all lower modes were estimated."""


def _patch_offsets(q):
    if q < 1 or q % 2 == 0:
        raise ValueError(f"patch side q must be a positive odd integer, got {q}")
    h = (q - 1) // 2
    dy, dx = np.mgrid[-h:h + 1, -h:h + 1]
    return dx.ravel().astype(float), dy.ravel().astype(float)


def extract_patch_vectors(image, shapes, q=15):
    """Patch vectors of many shapes at once: ``(n_shapes, M * q * q)``.

    Each landmark contributes a ``q x q`` patch centred on it (row-major,
    bilinear, edge-replicated), in landmark order.
    """
    px = as_image(image)
    S = np.atleast_2d(np.asarray(shapes, dtype=np.float64))
    if S.shape[1] == 0:
        raise DegenerateInputError("empty shape")
    if S.shape[1] % 2:
        raise DimensionError("shape vectors need an even length")
    dx, dy = _patch_offsets(q)
    pts = S.reshape(S.shape[0], -1, 2)
    xs = pts[:, :, 0:1] + dx
    ys = pts[:, :, 1:2] + dy
    vals = ndimage.map_coordinates(px, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    return vals.reshape(S.shape[0], -1)


def extract_shape_patch_vector(image, shape, q=15):
    """Concatenated ``q x q`` patches at each landmark of one shape (length ``M q^2``)."""
    shape = as_shape_vector(shape)
    return extract_patch_vectors(image, shape[None, :], q)[0]


def mode_grid(step, n_std=3.0):
    """Weights ``step * j`` (in standard deviations) covering ``[-n_std, n_std]``."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    n = int(np.floor(n_std / step + 1e-9))
    return step * np.arange(-n, n + 1)


def _check_mode(model: ShapeModel, k):
    if not 1 <= k <= model.n_modes:
        raise ValueError(f"mode {k} outside 1..{model.n_modes}")


def fabricate_mode_hypotheses(model: ShapeModel, image, gt_shape, sp: SpaceParams, k, q=15,
                              grid_step=0.25, exclusion=0.25, n_std=3.0, extra_positives=0,
                              positive_band=0.05):
    """Labelled patch vectors for mode ``k`` of one training image.

    The positive is the patch vector at the ground-truth landmarks. Negatives
    keep modes ``1..k-1`` at the projected true weights, set modes above ``k``
    to zero and put mode ``k`` on every grid value at least ``exclusion``
    standard deviations from its true weight. ``extra_positives`` adds shapes
    of that same family with mode ``k`` spread evenly over
    ``true +- positive_band``. ``values`` and ``truth`` of the result are in
    standard deviations.
    """
    _check_mode(model, k)
    if positive_band >= exclusion:
        raise ValueError("positive_band must be narrower than the exclusion margin")
    gt = as_shape_vector(gt_shape, model.n_landmarks)
    b_true = project_shape(model, gt, sp)
    sd = model.std
    u_true = b_true[k - 1] / sd[k - 1]
    grid = mode_grid(grid_step, n_std)
    neg_u = grid[np.abs(grid - u_true) >= exclusion - 1e-12]
    pos_u = (u_true + np.linspace(-positive_band, positive_band, extra_positives)
             if extra_positives > 1 else np.full(extra_positives, u_true))
    base = np.zeros(model.n_modes)
    base[:k - 1] = b_true[:k - 1]
    cands = []
    for u in np.concatenate([pos_u, neg_u]):
        b = base.copy()
        b[k - 1] = u * sd[k - 1]
        cands.append(synthesize_shape(model, b, sp))
    shapes = np.vstack([gt[None, :]] + cands)
    X = extract_patch_vectors(image, shapes, q)
    y = np.concatenate([np.ones(1 + len(pos_u)), np.zeros(len(neg_u))])
    values = np.concatenate([[u_true], pos_u, neg_u])
    return Hypotheses(X, y, values, np.full(len(values), u_true))


def train_mode_detector(hypotheses: Hypotheses, k, cfg: ShapeConfig, seed=0):
    """SdAE + DNN detector for mode ``k`` (balanced per epoch)."""
    if np.unique(hypotheses.y).size < 2:
        raise DegenerateInputError(f"mode {k} hypotheses contain a single class")
    return train_detector(hypotheses.X, hypotheses.y, cfg.net, seed=seed + 50 * k)


def estimate_mode(detector, image, x_prev, model: ShapeModel, sp: SpaceParams, k, q=15,
                  scan_step=0.05, top_n=10, n_std=3.0):
    """Weight of mode ``k`` given the stage ``k-1`` shape ``x_prev`` (image space).

    Candidates are ``x_prev + A(p_k * u * sqrt(lambda_k))`` for ``u`` on the
    scan grid, where ``A`` is the linear part of ``sp``. Returns the clamped
    mean of the ``top_n`` best weights, in model units.
    """
    _check_mode(model, k)
    x_prev = as_shape_vector(x_prev, model.n_landmarks)
    grid = mode_grid(scan_step, n_std)
    sd = model.std[k - 1]
    direction = sp.apply_linear(model.eigvecs[:, k - 1])
    cands = x_prev[None, :] + np.outer(grid * sd, direction)
    scores = score_hypotheses(detector, extract_patch_vectors(image, cands, q), grid)
    est, flat = top_n_average(grid, scores, top_n)
    if flat:
        warnings.warn(f"mode {k} scores are flat; keeping the mean for this mode",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(est, -n_std, n_std) * sd)


@dataclass
class ModeDetectorSet:
    detectors: dict = field(default_factory=dict)
    q: int = 15
    scan_step: float = 0.05
    top_n: int = 10
    n_std: float = 3.0
    grid_step: float = 0.25
    exclusion: float = 0.25
    audits: dict = field(default_factory=dict)

    @property
    def K(self):
        return max(self.detectors) if self.detectors else 0

    def detector(self, k):
        det = self.detectors.get(k)
        if det is None:
            raise MissingDetectorError(f"no detector for mode {k}")
        return det

    def check(self, K_use):
        missing = [k for k in range(1, K_use + 1) if self.detectors.get(k) is None]
        if missing:
            raise MissingDetectorError(f"no detector for mode(s) {missing}")

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for k in sorted(self.detectors):
            det = self.detectors[k]
            if not isinstance(det, NetworkModel):
                raise TypeError("only trained networks can be saved")
            det.save(out / f"mode{k}.json")
            files[str(k)] = f"mode{k}.json"
        manifest = {"version": BUNDLE_VERSION, "q": self.q, "scan_step": self.scan_step,
                    "top_n": self.top_n, "K": self.K, "n_std": self.n_std,
                    "grid_step": self.grid_step, "exclusion": self.exclusion,
                    "units": "stddev", "files": files, "audits": self.audits}
        (out / "mode_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, in_dir):
        d = Path(in_dir)
        path = d / "mode_manifest.json"
        if not path.exists():
            raise MissingDetectorError(f"{path} not found")
        m = json.loads(path.read_text())
        if m.get("units") != "stddev":
            raise ValueError(f"unsupported weight units {m.get('units')!r}")
        dets = {}
        for k, name in m["files"].items():
            f = d / name
            if f.exists():
                dets[int(k)] = NetworkModel.load(f)
        return cls(dets, m["q"], m["scan_step"], m["top_n"], m["n_std"], m["grid_step"],
                   m["exclusion"], m.get("audits", {}))


class MarginalShapeEstimator:
    """Stage-by-stage refinement of one image; ``x`` holds the current shape.

    ``step(k)`` must be called with ``k = 1, 2, ...`` in turn.
    """

    def __init__(self, image, sp: SpaceParams, model: ShapeModel, detectors: ModeDetectorSet):
        self.image = as_image(image)
        self.sp = sp
        self.model = model
        self.detectors = detectors
        self.weights = np.zeros(model.n_modes)
        self.x = synthesize_shape(model, self.weights, sp)
        self.stages = [self.x.copy()]
        self.next_mode = 1

    def step(self, k):
        if k != self.next_mode:
            raise OrderError(f"mode {k} requested but mode {self.next_mode} is next")
        d = self.detectors
        b_k = estimate_mode(d.detector(k), self.image, self.x, self.model, self.sp, k, d.q,
                            d.scan_step, d.top_n, d.n_std)
        self.weights[k - 1] = b_k
        self.x = self.x + self.sp.apply_linear(self.model.eigvecs[:, k - 1] * b_k)
        self.stages.append(self.x.copy())
        self.next_mode += 1
        return b_k


@dataclass
class ShapeEstimate:
    shape: np.ndarray
    weights: np.ndarray
    stages: list


def segment(image, sp: SpaceParams, model: ShapeModel, detectors: ModeDetectorSet, K_use=None):
    """Shape after ``K_use`` marginal stages (all detector modes by default).

    ``K_use = 0`` gives the mean shape placed by ``sp``. Missing detectors are
    reported before any mode is estimated.
    """
    K_use = min(detectors.K, model.n_modes) if K_use is None else int(K_use)
    if K_use < 0:
        raise ValueError("K_use must be >= 0")
    if K_use > model.n_modes:
        raise ValueError(f"K_use={K_use} exceeds the model's {model.n_modes} modes")
    detectors.check(K_use)
    est = MarginalShapeEstimator(image, sp, model, detectors)
    for k in range(1, K_use + 1):
        est.step(k)
    return ShapeEstimate(est.x, est.weights.copy(), est.stages)


def build_mode_hypotheses(samples, k, cfg: ShapeConfig):
    """Hypotheses for mode ``k`` over ``(image, shape, model, sp)`` samples, audited."""
    hyps = [fabricate_mode_hypotheses(model, im, s, sp, k, cfg.q, cfg.train_grid_step,
                                      cfg.exclusion, cfg.n_std, cfg.extra_positives,
                                      cfg.positive_band)
            for im, s, model, sp in samples if k <= model.n_modes]
    h = Hypotheses.concat(hyps)
    audit = audit_partition(h, cfg.positive_band, cfg.exclusion, f"mode {k}")
    return h, audit


def train_mode_detectors(samples, K, cfg: ShapeConfig, seed=0):
    """Train detectors for modes ``1..K``; returns a :class:`ModeDetectorSet`."""
    dets, audits = {}, {}
    for k in range(1, K + 1):
        h, audits[f"mode{k}"] = build_mode_hypotheses(samples, k, cfg)
        log.info("mode %d: training on %d hypotheses", k, len(h))
        dets[k] = train_mode_detector(h, k, cfg, seed)
    return ModeDetectorSet(dets, cfg.q, cfg.scan_step, cfg.top_n, cfg.n_std, cfg.train_grid_step,
                           cfg.exclusion, audits)
