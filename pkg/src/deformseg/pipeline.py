"""End-to-end segmenter: space detectors, aspect-ratio groups, per-group
shape models and marginal mode detectors behind one estimator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_image, as_shape_vector
from .config import PipelineConfig, desk_preset
from .data import AugmentConfig, IntensityPCA, augment
from .exceptions import DimensionError, MissingDetectorError
from .shape_learning import ModeDetectorSet, segment, train_mode_detectors
from .shape_model import (GroupSplit, ShapeModel, SingleGroupFallback, aspect_ratio, build_ssm,
                          cluster_aspect_ratios, fit_space_to_box, select_model)
from .space import (SpaceDetectorSet, SpaceEstimate, box_of_shape, estimate_space,
                    learn_search_windows, train_line_detectors,
                    train_orientation_detector)

log = logging.getLogger(__name__)

PIPELINE_VERSION = 1


def _unit_box(shape):
    pts = shape.reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return ((pts - 0.5 * (lo + hi)) / (hi - lo)).reshape(-1)


def box_frame_model(shapes, thetas, energy_fraction=0.95, n_modes=None, group_id=0, n_parts=2,
                    n_iter=5):
    """Shape model in the box-normalised frame.

    Every training shape is mapped back through the space parameters that fit
    the current mean to its bounding box and orientation; the mean is
    re-estimated from those shapes a few times before the PCA. Returns the
    model and the per-shape space parameters.
    """
    X = np.vstack([as_shape_vector(s) for s in shapes])
    thetas = np.asarray(thetas, dtype=np.float64)
    boxes = [box_of_shape(x) for x in X]

    def derotated(x, th):
        pts = x.reshape(-1, 2)
        c = pts.mean(axis=0)
        ct, st = np.cos(-th), np.sin(-th)
        R = np.array([[ct, -st], [st, ct]])
        return ((pts - c) @ R.T).reshape(-1)

    mean = _unit_box(np.mean([_unit_box(derotated(x, t)) for x, t in zip(X, thetas)], axis=0))
    for _ in range(n_iter):
        sps = [fit_space_to_box(mean, T, S, t) for (T, S), t in zip(boxes, thetas)]
        Y = np.vstack([sp.inverse_apply(x) for sp, x in zip(sps, X)])
        mean = _unit_box(Y.mean(axis=0))
    sps = [fit_space_to_box(mean, T, S, t) for (T, S), t in zip(boxes, thetas)]
    Y = np.vstack([sp.inverse_apply(x) for sp, x in zip(sps, X)])
    model = build_ssm(Y, energy_fraction, group_id, n_modes, n_parts)
    sps = [fit_space_to_box(model.mean, T, S, t) for (T, S), t in zip(boxes, thetas)]
    return model, sps


@dataclass
class SegmentationResult:
    shape: np.ndarray
    space: SpaceEstimate
    group: int
    space_params: object
    weights: np.ndarray
    stages: list


class DeformableSegmenter(BaseEstimator):
    """Learned space + shape segmentation of one deformable object per image.

    Parameters
    ----------
    config : PipelineConfig, optional
        All tunables; the desk preset when omitted.

    ``fit(images, shapes, thetas)`` takes landmark shapes (``(2M,)`` vectors
    or ``(M, 2)`` arrays in pixels) and the true orientation of every image.
    """

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config

    def _cfg(self):
        return self.config if self.config is not None else desk_preset()

    # -- training -------------------------------------------------------------

    def fit(self, images, shapes, thetas):
        """Train both stages: space detectors, then shape models and mode detectors."""
        data = self._check_training_data(images, shapes, thetas)
        pca = self._intensity_pca(data[0])
        self._fit_space(*data, pca)
        self._fit_shape(*data, pca)
        return self

    def fit_space(self, images, shapes, thetas):
        data = self._check_training_data(images, shapes, thetas)
        self._fit_space(*data, self._intensity_pca(data[0]))
        return self

    def fit_shape(self, images, shapes, thetas):
        data = self._check_training_data(images, shapes, thetas)
        self._fit_shape(*data, self._intensity_pca(data[0]))
        return self

    def _check_training_data(self, images, shapes, thetas):
        imgs = [as_image(im) for im in images]
        shps = [as_shape_vector(s) for s in shapes]
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1)
        if not imgs or not (len(imgs) == len(shps) == len(thetas)):
            raise DimensionError("images, shapes and thetas must be non-empty and equally long")
        dims = {im.shape for im in imgs}
        if len(dims) != 1:
            raise DimensionError(f"training images differ in size: {sorted(dims)}")
        if len({s.size for s in shps}) != 1:
            raise DimensionError("training shapes differ in landmark count")
        self.n_features_in_ = shps[0].size
        self.image_dims_ = (imgs[0].shape[1], imgs[0].shape[0])
        return imgs, shps, thetas

    def _intensity_pca(self, imgs):
        aug = self._cfg().augment
        if not aug.intensity_copies:
            return None
        return IntensityPCA(aug.n_components, aug.pca_size, aug.alpha_std).fit(imgs)

    def _fit_space(self, imgs, shps, thetas, pca):
        cfg = self._cfg()
        copies = cfg.augment.intensity_copies
        lines, audits = train_line_detectors(imgs, shps, cfg.line, cfg.seed, copies, pca,
                                             cfg.n_parts, thetas)
        orient, audits["orientation"] = train_orientation_detector(
            imgs, shps, thetas, cfg.orientation, cfg.seed, copies, pca, cfg.n_parts)
        windows = learn_search_windows(shps, self.image_dims_, cfg.line.search_margin, cfg.line.flips)
        self.space_ = SpaceDetectorSet(lines, orient, cfg.line, cfg.orientation, self.image_dims_,
                                       cfg.bit_depth, audits, windows)

    def _fit_shape(self, imgs, shps, thetas, pca):
        cfg = self._cfg()
        self.split_, groups = self._groups(shps, cfg)
        self.models_, self.train_space_params_ = {}, [None] * len(shps)
        for g in sorted(set(groups.tolist())):
            idx = np.flatnonzero(groups == g)
            model, sps = box_frame_model([shps[i] for i in idx], thetas[idx],
                                         cfg.shape.energy_fraction, cfg.shape.n_modes, g, cfg.n_parts)
            self.models_[g] = model
            for i, sp in zip(idx, sps):
                self.train_space_params_[i] = sp
        self.train_groups_ = groups
        K = min(m.n_modes for m in self.models_.values())
        self.modes_ = train_mode_detectors(self._shape_samples(imgs, shps, thetas, groups, pca, cfg),
                                           K, cfg.shape, cfg.seed)

    @property
    def stages_(self):
        return [name for name, attr in (("space", "space_"), ("shape", "modes_"))
                if hasattr(self, attr)]

    def training_log(self):
        """Per-epoch loss traces of every trained network, keyed by detector name."""
        nets = {}
        if hasattr(self, "space_"):
            for i in (1, 2, 3, 4):
                nets[f"line{i}"] = self.space_.line_detector(i)
            nets["orientation"] = self.space_.orientation
        if hasattr(self, "modes_"):
            for k, det in sorted(self.modes_.detectors.items()):
                nets[f"mode{k}"] = det
        return {name: {"layer_dims": list(net.layer_dims), "loss_trace": list(net.loss_trace)}
                for name, net in nets.items()}

    def _groups(self, shapes, cfg):
        ratios = np.array([aspect_ratio(box_of_shape(s)[1]) for s in shapes])
        try:
            split = cluster_aspect_ratios(ratios, cfg.grouping.threshold)
        except SingleGroupFallback as exc:
            log.info("single shape group: %s", exc)
            return None, np.zeros(len(shapes), dtype=int)
        counts = np.bincount(split.groups, minlength=2)
        if counts.min() < cfg.grouping.min_group_size:
            log.info("single shape group: group sizes %s", counts.tolist())
            return None, np.zeros(len(shapes), dtype=int)
        return split, split.groups

    def _shape_samples(self, imgs, shps, thetas, groups, pca, cfg):
        aug = cfg.augment
        acfg = AugmentConfig(flips=tuple(cfg.shape.flips), intensity_copies=aug.intensity_copies,
                             seed=cfg.seed + 3)
        extras = [{"theta": float(t)} for t in thetas]
        a_imgs, a_shps, origin, a_ext = augment(imgs, shps, acfg, pca, cfg.n_parts, extras)
        samples = []
        for im, s, (src, _), e in zip(a_imgs, a_shps, origin, a_ext):
            model = self.models_[int(groups[src])]
            T, S = box_of_shape(s)
            samples.append((im, s, model, fit_space_to_box(model.mean, T, S, e["theta"])))
        return samples

    # -- inference ------------------------------------------------------------

    def segment_image(self, image, n_modes=None):
        """Full result for one image; ``n_modes=0`` returns the placed mean shape."""
        check_is_fitted(self, ["space_", "modes_"])
        K = self.modes_.K if n_modes is None else int(n_modes)
        self.modes_.check(K)
        space = estimate_space(image, self.space_)
        group = 0 if self.split_ is None else self.split_.assign(aspect_ratio(space.S))
        model = select_model(aspect_ratio(space.S), self.split_, self.models_)
        sp = fit_space_to_box(model.mean, space.T, space.S, space.theta)
        est = segment(image, sp, model, self.modes_, K)
        return SegmentationResult(est.shape, space, group, sp, est.weights, est.stages)

    def predict(self, images, n_modes=None):
        return np.vstack([self.segment_image(im, n_modes).shape for im in images])

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir):
        """Write the trained stages under ``out_dir``.

        A stage already saved there by an earlier run (``train --stage space``
        followed by ``--stage shape``) is kept and listed in ``pipeline.json``.
        """
        if not self.stages_:
            raise MissingDetectorError("nothing trained yet")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc_path = out / "pipeline.json"
        old = json.loads(doc_path.read_text()) if doc_path.exists() else {}
        doc = {"version": PIPELINE_VERSION, "config": self._cfg().to_dict(),
               "n_features_in": self.n_features_in_, "image_dims": list(self.image_dims_),
               "stages": sorted(set(old.get("stages", [])) | set(self.stages_)),
               "groups": old.get("groups"), "split": old.get("split")}
        if old and old.get("n_features_in") != self.n_features_in_:
            raise DimensionError(f"{out} holds a bundle for {old.get('n_features_in') // 2} "
                                 f"landmarks, not {self.n_features_in_ // 2}")
        if hasattr(self, "space_"):
            self.space_.save(out / "space")
        if hasattr(self, "modes_"):
            self.modes_.save(out / "modes")
            (out / "models").mkdir(exist_ok=True)
            for g, m in self.models_.items():
                m.save(out / "models" / f"group{g}.json")
            doc["groups"] = sorted(self.models_)
            doc["split"] = None
            if self.split_ is not None:
                doc["split"] = {"threshold": self.split_.threshold, "method": self.split_.method,
                                "means": list(self.split_.means), "stds": list(self.split_.stds),
                                "weights": list(self.split_.weights)}
        doc_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, in_dir, stages=("space", "shape")):
        """Load a saved bundle; every stage in ``stages`` must be present."""
        d = Path(in_dir)
        path = d / "pipeline.json"
        if not path.exists():
            raise MissingDetectorError(f"{path} not found")
        doc = json.loads(path.read_text())
        missing = [s for s in stages if s not in doc.get("stages", [])]
        if missing:
            raise MissingDetectorError(f"{d} has no trained {' or '.join(missing)} stage")
        obj = cls(PipelineConfig.from_dict(doc["config"]))
        obj.n_features_in_ = doc["n_features_in"]
        obj.image_dims_ = tuple(doc["image_dims"])
        if "space" in stages:
            obj.space_ = SpaceDetectorSet.load(d / "space")
        if "shape" in stages:
            obj.modes_ = ModeDetectorSet.load(d / "modes")
            obj.models_ = {g: ShapeModel.load(d / "models" / f"group{g}.json")
                           for g in doc["groups"]}
            s = doc["split"]
            obj.split_ = None if s is None else GroupSplit(
                s["threshold"], np.zeros(0, dtype=int), tuple(s["means"]), tuple(s["stds"]),
                tuple(s["weights"]), s["method"])
        return obj
