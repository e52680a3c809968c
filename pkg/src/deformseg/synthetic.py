"""Synthetic two-lobed deformable-shape benchmark with full ground truth.

Each image holds a bilaterally mirrored pair of smooth lobes, drawn from one
of two shape groups (tall and wide boxes) so the aspect-ratio model selection
is exercised. Shapes come from a known PCA model and are placed by a known
anisotropic similarity. They are rendered like a frontal radiograph (dark
lobes, soft-tissue body, bright central band, air outside), blurred slightly
and corrupted with Gaussian noise. Pixels are
quantised to 12 bits so in-memory images equal what is written to disk.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (DatasetManifest, GrayImage, ManifestEntry, is_simple_polygon, rasterize_shape,
                   save_image, shape_parts)
from .exceptions import DegenerateInputError
from .shape_model import (ShapeModel, SpaceParams, bounding_lines, clamp_weights, rotation_matrix,
                          synthesize_shape)


@dataclass
class SyntheticSpec:
    count: int = 100
    dims: tuple = (256, 256)
    n_landmarks: int = 32
    n_modes: int = 5
    eigvals: tuple = (0.0375, 0.019, 0.010, 0.006, 0.0038)
    group_fraction: float = 0.5
    # per group: (box height range, box aspect ratio range)
    group_heights: tuple = ((160.0, 190.0), (110.0, 135.0))
    group_aspects: tuple = ((0.95, 1.10), (1.35, 1.50))
    theta_range: float = 0.12
    translation_jitter: float = 8.0
    margin: float = 10.0
    min_gap: float = 6.0
    foreground: float = 0.22
    background: float = 0.55
    texture: float = 0.06
    edge_blur: float = 1.0
    noise: float = 0.03
    bit_depth: int = 12
    spacing: tuple = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.n_landmarks % 2 or self.n_landmarks < 8:
            raise ValueError("n_landmarks must be even and >= 8")
        if len(self.eigvals) != self.n_modes:
            raise ValueError("need one eigenvalue per mode")
        if any(a < b for a, b in zip(self.eigvals, self.eigvals[1:])) or min(self.eigvals) < 0:
            raise ValueError("eigenvalues must be non-negative and descending")


@dataclass
class SyntheticDataset:
    images: list
    shapes: np.ndarray
    truths: list
    models: dict
    spec: SyntheticSpec

    @property
    def thetas(self):
        return np.array([t["theta"] for t in self.truths])

    @property
    def groups(self):
        return np.array([t["group"] for t in self.truths])


def _lobe(n, width, height, wobble):
    """Closed clockwise lobe (in image coordinates, y down) of ``n`` points,
    first point at the apex."""
    t = -0.5 * np.pi + 2 * np.pi * np.arange(n) / n
    r = 1.0 + wobble[0] * np.cos(2 * t + 0.6) + wobble[1] * np.cos(3 * t - 0.4)
    x = 0.5 * width * r * np.cos(t)
    y = 0.5 * height * r * np.sin(t)
    # flatten the medial side and drop the outer-lower corner
    x = x + 0.08 * width * np.clip(np.sin(t), 0, None) ** 2
    return np.column_stack([x, y])


def group_mean_shape(n_landmarks, group):
    """Unit-box mean shape of a group: right lobe (image left) then its mirror."""
    per = n_landmarks // 2
    lobe_w, lobe_h, gap = ((0.40, 1.0, 0.24), (0.43, 1.0, 0.22))[group]
    wobble = ((0.07, 0.04), (0.05, 0.05))[group]
    right = _lobe(per, lobe_w, lobe_h, wobble)
    right[:, 0] -= gap / 2 + right[:, 0].max()
    left = right * np.array([-1.0, 1.0])
    pts = np.vstack([right, left])
    pts -= 0.5 * (pts.max(axis=0) + pts.min(axis=0))
    pts /= pts.max(axis=0) - pts.min(axis=0)
    return pts.reshape(-1)


def _similarity_basis(mean):
    pts = mean.reshape(-1, 2)
    tx = np.tile([1.0, 0.0], len(pts))
    ty = np.tile([0.0, 1.0], len(pts))
    rot = np.column_stack([-pts[:, 1], pts[:, 0]]).reshape(-1)
    return np.column_stack([tx, ty, rot, pts[:, 0].repeat(2) * np.tile([1, 0], len(pts)),
                            pts[:, 1].repeat(2) * np.tile([0, 1], len(pts))])


def generative_modes(mean, n_modes, rng):
    """Orthonormal smooth deformation modes, free of translation, rotation and axis scaling."""
    pts = mean.reshape(-1, 2)
    n = len(pts)
    per = n // 2
    t = 2 * np.pi * (np.arange(n) % per) / per
    side = np.where(np.arange(n) < per, 1.0, -1.0)
    centre = np.vstack([pts[:per].mean(axis=0)] * per + [pts[per:].mean(axis=0)] * per)
    normal = pts - centre
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    fields = []
    for k in range(n_modes + 4):
        freq = 1 + (k % 3)
        phase = rng.uniform(0, 2 * np.pi)
        sym = 1.0 if k % 2 == 0 else side
        amp = np.cos(freq * t + phase) * sym
        fields.append((normal * amp[:, None]).reshape(-1))
    F = np.column_stack(fields)
    B = np.linalg.qr(_similarity_basis(mean))[0]
    F = F - B @ (B.T @ F)
    Q, _ = np.linalg.qr(F)
    Q = Q[:, :n_modes]
    pivot = np.argmax(np.abs(Q), axis=0)
    return Q * np.where(Q[pivot, np.arange(n_modes)] < 0, -1.0, 1.0)


def generative_models(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.seed, 7919])
    models = {}
    for g in (0, 1):
        mean = group_mean_shape(spec.n_landmarks, g)
        P = generative_modes(mean, spec.n_modes, rng)
        models[g] = ShapeModel(mean, P, np.asarray(spec.eigvals, dtype=float), 1.0, g,
                               np.asarray(spec.eigvals, dtype=float), 2)
    return models


def _texture(rng, dims, sigma):
    w, h = dims
    field_ = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="reflect")
    return field_ / max(np.abs(field_).max(), 1e-12)


def _render(shape, sp: SpaceParams, spec: SyntheticSpec, rng):
    """Radiograph-like rendering: dark lobes inside a soft-tissue body ellipse,
    a bright central band between them that widens towards the bottom, and air
    around the body."""
    w, h = spec.dims
    lobes = rasterize_shape(shape, spec.dims, 2, validate=True).astype(float)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    R = rotation_matrix(sp.theta)
    l1, l2, l3, l4 = bounding_lines(shape)
    centre = np.array([(l3 + l4) / 2, (l1 + l2) / 2])
    # image pixels in the shape's own (unrotated) frame
    u = R[0, 0] * (xx - centre[0]) + R[1, 0] * (yy - centre[1])
    v = R[0, 1] * (xx - centre[0]) + R[1, 1] * (yy - centre[1])
    bw, bh = sp.S
    body = ((u / (0.5 * bw * 1.5)) ** 2 + (v / (0.5 * bh * 1.4)) ** 2) <= 1.0
    right, left = shape_parts(shape, 2)
    inner = 0.5 * (right[:, 0].max() + left[:, 0].min()) - centre[0]
    t = np.clip((v + 0.1 * bh) / (0.6 * bh), 0.0, 1.0)
    half = 0.09 * bw + 0.16 * bw * t ** 1.5
    band = (np.abs(u - inner) <= half) & (v >= -0.62 * bh) & body
    top = 2 ** spec.bit_depth
    img = np.where(body, spec.background, 0.04)
    img = np.where(band, spec.background + 0.22, img)
    img = img + spec.texture * _texture(rng, spec.dims, 8.0)
    soft = ndimage.gaussian_filter(lobes, spec.edge_blur) if spec.edge_blur > 0 else lobes
    lung = spec.foreground + 0.5 * spec.texture * _texture(rng, spec.dims, 5.0)
    img = ndimage.gaussian_filter(img, 1.0) * (1 - soft) + lung * soft
    img = img + rng.normal(0.0, spec.noise, size=(h, w))
    return np.clip(np.rint(np.clip(img, 0, 1) * top), 0, top - 1) / top


def _draw_one(spec, models, index):
    rng = np.random.default_rng([spec.seed, index])
    group = int(rng.random() >= spec.group_fraction)
    model = models[group]
    w, h = spec.dims
    for _ in range(200):
        b = clamp_weights(rng.normal(0.0, np.sqrt(model.eigvals)), model.eigvals)
        height = rng.uniform(*spec.group_heights[group])
        aspect = rng.uniform(*spec.group_aspects[group])
        theta = rng.uniform(-spec.theta_range, spec.theta_range)
        T = (w / 2 - 0.5 + rng.uniform(-1, 1) * spec.translation_jitter,
             h / 2 - 0.5 + rng.uniform(-1, 1) * spec.translation_jitter)
        sp = SpaceParams(T=T, theta=theta, S=(aspect * height, height))
        shape = synthesize_shape(model, b, sp)
        l1, l2, l3, l4 = bounding_lines(shape)
        if (min(l1, l3) >= spec.margin and l2 <= h - 1 - spec.margin
                and l4 <= w - 1 - spec.margin):
            right, left = shape_parts(shape, 2)
            gap = np.min(np.hypot(*(right[:, None, :] - left[None, :, :]).transpose(2, 0, 1)))
            if gap >= spec.min_gap and is_simple_polygon(right) and is_simple_polygon(left):
                return group, b, sp, shape, rng
    raise DegenerateInputError("space-parameter ranges do not keep the shape inside the image")


def generate_synthetic_dataset(spec: SyntheticSpec):
    models = generative_models(spec)
    images, shapes, truths = [], [], []
    for i in range(spec.count):
        group, b, sp, shape, rng = _draw_one(spec, models, i)
        pixels = _render(shape, sp, spec, rng)
        l1, l2, l3, l4 = bounding_lines(shape)
        truths.append({
            "group": group,
            "space_params": sp.to_dict(),
            "shape_weights": b.tolist(),
            "theta": sp.theta,
            "box": {"T": [(l3 + l4) / 2, (l1 + l2) / 2], "S": [l4 - l3, l2 - l1]},
            "model_ref": f"models/generative_group{group}.json",
        })
        images.append(GrayImage(pixels, spec.spacing, spec.bit_depth))
        shapes.append(shape)
    return SyntheticDataset(images, np.vstack(shapes), truths, models, spec)


def primary_indices(per_side, n_primary=6):
    return np.unique(np.round(np.linspace(0, per_side, n_primary, endpoint=False)).astype(int))


def write_synthetic_dataset(ds: SyntheticDataset, out_dir):
    """Write images (16-bit PGM), per-image landmark and truth JSON, generative
    models and a dataset manifest. Returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "landmarks", "truth", "models"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for g, model in ds.models.items():
        model.save(out / "models" / f"generative_group{g}.json")
    per = ds.spec.n_landmarks // 2
    prim = primary_indices(per)
    entries = []
    for i, (img, shape, truth) in enumerate(zip(ds.images, ds.shapes, ds.truths)):
        name = f"img_{i:04d}"
        save_image(out / "images" / f"{name}.pgm", img, ds.spec.bit_depth)
        pts = shape.reshape(-1, 2)
        primary = [pts[prim].tolist(), pts[per + prim].tolist()]
        lm_doc = {"image_path": f"../images/{name}.pgm", "group": truth["group"],
                  "primary": primary, "landmarks": pts.tolist()}
        (out / "landmarks" / f"{name}.json").write_text(json.dumps(lm_doc, indent=1))
        (out / "truth" / f"{name}.json").write_text(json.dumps(truth, indent=1, sort_keys=True))
        entries.append(ManifestEntry(
            image_path=f"images/{name}.pgm", landmarks=shape, group=truth["group"],
            spacing=tuple(ds.spec.spacing), bit_depth=ds.spec.bit_depth, theta=truth["theta"],
            extra={"name": name, "truth_path": f"truth/{name}.json"}))
    manifest = DatasetManifest(entries, tuple(ds.spec.dims), ds.spec.seed)
    path = out / "manifest.json"
    manifest.save(path)
    spec_doc = asdict(ds.spec)
    (out / "synthetic_spec.json").write_text(json.dumps(spec_doc, indent=1, sort_keys=True))
    return path
