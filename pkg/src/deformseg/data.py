"""Images, manifests, augmentation and polygon rasterisation."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import as_image, as_shape_vector
from .exceptions import DegenerateInputError, DimensionError


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Normalised intensities in [0, 1], row-major ``(height, width)``."""

    pixels: np.ndarray
    spacing: tuple = (1.0, 1.0)
    bit_depth_source: int = 12

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or min(px.shape) == 0:
            raise DimensionError(f"image must be 2-D and non-empty, got {px.shape}")
        if px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 2 or min(sp) <= 0:
            raise ValueError("spacing must be two positive numbers")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", sp)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def dims(self):
        return (self.width, self.height)


# --- file formats -----------------------------------------------------------

def _pgm_tokens(data):
    """Parse the P5 header; returns (width, height, maxval, offset of raster)."""
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(int(data[i:j]))
        i = j
    return tokens[0], tokens[1], tokens[2], i + 1


def read_pgm(path):
    """Read a binary (P5) PGM as an integer array."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval, off = _pgm_tokens(data)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=off)
    return raw.reshape(h, w).astype(np.int64), maxval


def write_pgm(path, raw, maxval=65535):
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise DimensionError("PGM raster must be 2-D")
    if raw.min() < 0 or raw.max() > maxval:
        raise ValueError("raw values exceed maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{raw.shape[1]} {raw.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raw.astype(dtype).tobytes())


def read_raw(path):
    """Integer raster of a PGM or PNG file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cannot read image {path}")
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)[0]
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        raise ValueError(f"{path}: only single-channel images are supported")
    return arr.astype(np.int64)


def normalize_raw(raw, bit_depth=12):
    raw = np.asarray(raw)
    top = 2 ** int(bit_depth)
    if raw.min() < 0 or raw.max() >= top:
        raise ValueError(f"raw values outside [0, {top - 1}] for bit depth {bit_depth}")
    return raw.astype(np.float64) / top


def load_and_normalize(path, bit_depth=12, spacing=(1.0, 1.0)):
    """Load a grayscale image and divide by ``2**bit_depth``."""
    return GrayImage(normalize_raw(read_raw(path), bit_depth), spacing, int(bit_depth))


def save_image(path, image, bit_depth=12):
    """Write normalised intensities as a 16-bit PGM holding ``bit_depth``-bit values."""
    px = as_image(image)
    top = 2 ** int(bit_depth)
    raw = np.clip(np.rint(px * top), 0, top - 1).astype(np.int64)
    write_pgm(path, raw, maxval=65535 if bit_depth > 8 else 255)


def save_mask(path, mask):
    write_pgm(path, np.asarray(mask, dtype=np.int64) * 255, maxval=255)


def write_overlay_png(path, image, gt_mask, seg_mask):
    """GT-only pixels green, SEG-only red, overlap blue, over the grey image."""
    from PIL import Image

    px = as_image(image)
    rgb = np.repeat((px * 255)[..., None], 3, axis=2)
    gt = np.asarray(gt_mask, bool)
    seg = np.asarray(seg_mask, bool)
    colours = ((gt & ~seg, (0, 255, 0)), (seg & ~gt, (255, 0, 0)), (gt & seg, (0, 0, 255)))
    for where, colour in colours:
        rgb[where] = 0.5 * rgb[where] + 0.5 * np.asarray(colour)
    Image.fromarray(np.clip(rgb, 0, 255).astype(np.uint8)).save(path)


# --- resampling ---------------------------------------------------------------

def resize_image(image, target_dims, order=3):
    """Cubic B-spline resampling to ``target_dims = (width, height)``.

    Pixel centres are aligned (``src = (dst + 0.5) * in / out - 0.5``) and the
    spacing is rescaled so the physical extent is unchanged.
    """
    px = as_image(image)
    w, h = (int(v) for v in target_dims)
    if w < 1 or h < 1:
        raise DimensionError(f"degenerate target dims {target_dims}")
    spacing = getattr(image, "spacing", (1.0, 1.0))
    depth = getattr(image, "bit_depth_source", 12)
    H, W = px.shape
    if (w, h) == (W, H):
        out = px.copy()
    else:
        ys = (np.arange(h) + 0.5) * H / h - 0.5
        xs = (np.arange(w) + 0.5) * W / w - 0.5
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        out = ndimage.map_coordinates(px, [yy, xx], order=order, mode="nearest")
    new_spacing = (spacing[0] * W / w, spacing[1] * H / h)
    return GrayImage(np.clip(out, 0.0, 1.0), new_spacing, depth)


def sample_bilinear(image, xs, ys):
    """Bilinear samples at real-valued pixel coordinates with edge replication."""
    px = as_image(image)
    return ndimage.map_coordinates(px, [np.asarray(ys), np.asarray(xs)], order=1, mode="nearest")


# --- manifests ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    image_path: str
    landmarks: np.ndarray | None = None
    primary: list | None = None
    group: int | None = None
    spacing: tuple = (1.0, 1.0)
    bit_depth: int = 12
    theta: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"image_path": self.image_path, "spacing": list(self.spacing),
             "bit_depth": self.bit_depth}
        if self.landmarks is not None:
            d["landmarks"] = np.asarray(self.landmarks).reshape(-1, 2).tolist()
        if self.primary is not None:
            d["primary"] = [list(map(float, p)) for p in self.primary]
        if self.group is not None:
            d["group"] = int(self.group)
        if self.theta is not None:
            d["theta"] = float(self.theta)
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d, base=None):
        known = {"image_path", "landmarks", "primary", "group", "spacing", "bit_depth", "theta"}
        path = d["image_path"]
        if base is not None and not Path(path).is_absolute():
            path = str(Path(base) / path)
        lms = d.get("landmarks")
        return cls(
            image_path=path,
            landmarks=None if lms is None else as_shape_vector(lms),
            primary=d.get("primary"),
            group=d.get("group"),
            spacing=tuple(d.get("spacing", (1.0, 1.0))),
            bit_depth=int(d.get("bit_depth", 12)),
            theta=d.get("theta"),
            extra={k: v for k, v in d.items() if k not in known},
        )


@dataclass
class DatasetManifest:
    entries: list
    target_dims: tuple | None = None
    seed: int = 0

    def to_dict(self):
        return {"target_dims": None if self.target_dims is None else list(self.target_dims),
                "seed": self.seed, "entries": [e.to_dict() for e in self.entries]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [ManifestEntry.from_dict(e, base=path.parent) for e in doc["entries"]]
        counts = {e.landmarks.size for e in entries if e.landmarks is not None}
        if len(counts) > 1:
            raise DimensionError(f"manifest mixes landmark counts {sorted(c // 2 for c in counts)}")
        td = doc.get("target_dims")
        return cls(entries, None if td is None else tuple(td), int(doc.get("seed", 0)))


def load_dataset(manifest: DatasetManifest, require_landmarks=True):
    """Load images (resized to the manifest target dims) with their landmarks.

    Returns ``(images, shapes, entries)`` where ``images`` is a list of
    :class:`GrayImage` and shapes are rescaled along with the pixels.
    """
    images, shapes = [], []
    for e in manifest.entries:
        img = load_and_normalize(e.image_path, e.bit_depth, e.spacing)
        shape = e.landmarks
        if shape is None and require_landmarks:
            raise ValueError(f"{e.image_path}: manifest entry has no landmarks")
        if manifest.target_dims is not None and tuple(manifest.target_dims) != img.dims:
            sx = manifest.target_dims[0] / img.width
            sy = manifest.target_dims[1] / img.height
            img = resize_image(img, manifest.target_dims)
            if shape is not None:
                pts = shape.reshape(-1, 2)
                shape = np.column_stack([(pts[:, 0] + 0.5) * sx - 0.5,
                                         (pts[:, 1] + 0.5) * sy - 0.5]).reshape(-1)
        images.append(img)
        shapes.append(shape)
    return images, shapes, list(manifest.entries)


# --- geometric and intensity augmentation ---------------------------------------

def mirror_permutation(n_landmarks, n_parts=2):
    """Landmark order of a horizontally mirrored bilateral shape.

    Sides swap and keep their index order: mirroring already turns the
    clockwise side counter-clockwise and vice versa, so landmark ``i`` of the
    mirrored left side is the anatomical landmark ``i`` of the new right side.
    """
    per = n_landmarks // n_parts
    return np.concatenate([part * per + np.arange(per) for part in reversed(range(n_parts))])


def flip_image(image, axis):
    """``axis='h'`` mirrors left-right, ``'v'`` top-bottom."""
    px = as_image(image)
    flipped = px[:, ::-1] if axis == "h" else px[::-1, :]
    if isinstance(image, GrayImage):
        return GrayImage(flipped.copy(), image.spacing, image.bit_depth_source)
    return flipped.copy()


def flip_shape(shape, dims, axis, n_parts=2, reorder=True):
    """Mirror landmark coordinates to match :func:`flip_image`."""
    pts = as_shape_vector(shape).reshape(-1, 2).copy()
    w, h = dims
    if axis == "h":
        pts[:, 0] = (w - 1) - pts[:, 0]
    else:
        pts[:, 1] = (h - 1) - pts[:, 1]
    if reorder and axis == "h":
        pts = pts[mirror_permutation(len(pts), n_parts)]
    return pts.reshape(-1)


class IntensityPCA:
    """Image-level PCA used for appearance augmentation.

    Components are computed on copies downsampled to ``size x size`` and
    upsampled to the image size on demand. Perturbations follow
    ``f + sum_j p_j * alpha_j * lambda_j`` with ``alpha_j ~ N(0, alpha_std)``.
    """

    def __init__(self, n_components=8, size=64, alpha_std=0.1):
        self.n_components = n_components
        self.size = size
        self.alpha_std = alpha_std

    def fit(self, images):
        small = np.stack([resize_image(GrayImage(np.clip(as_image(im), 0, 1)),
                                       (self.size, self.size)).pixels.reshape(-1)
                          for im in images])
        if small.shape[0] < 2:
            raise ValueError("need at least two images for intensity PCA")
        D = small - small.mean(axis=0)
        _, sv, Vt = np.linalg.svd(D, full_matrices=False)
        available = int(np.count_nonzero(sv > 1e-12 * max(sv[0], 1e-300)))
        if self.n_components > available:
            raise ValueError(f"{self.n_components} components requested, {available} available")
        J = self.n_components
        self.components_ = Vt[:J].reshape(J, self.size, self.size)
        self.eigvals_ = sv[:J] ** 2 / (small.shape[0] - 1)
        self._cache = {}
        return self

    def components_at(self, dims):
        dims = tuple(int(d) for d in dims)
        if dims not in self._cache:
            self._cache[dims] = np.stack([_upsample(c, dims) for c in self.components_])
        return self._cache[dims]

    def perturb(self, image, rng):
        px = as_image(image)
        alphas = rng.normal(0.0, self.alpha_std, size=self.eigvals_.size)
        basis = self.components_at((px.shape[1], px.shape[0]))
        return apply_intensity_perturbation(px, basis, self.eigvals_, alphas)


def _upsample(component, dims):
    w, h = dims
    H, W = component.shape
    ys = (np.arange(h) + 0.5) * H / h - 0.5
    xs = (np.arange(w) + 0.5) * W / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(component, [yy, xx], order=3, mode="nearest")


def apply_intensity_perturbation(image, basis, eigvals, alphas, clip=True):
    """``image + sum_j basis[j] * alphas[j] * eigvals[j]``, optionally clipped to [0, 1]."""
    px = as_image(image)
    basis = np.asarray(basis, dtype=np.float64).reshape(-1, *px.shape)
    eigvals = np.asarray(eigvals, dtype=np.float64).reshape(-1)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if not basis.shape[0] == eigvals.size == alphas.size:
        raise DimensionError("basis, eigvals and alphas must have one entry per component")
    out = px + np.tensordot(alphas * eigvals, basis, axes=1)
    return np.clip(out, 0.0, 1.0) if clip else out


@dataclass
class AugmentConfig:
    flips: tuple = ("h",)
    intensity_copies: int = 1
    n_components: int = 8
    pca_size: int = 64
    alpha_std: float = 0.1
    seed: int = 0


def augment(images, shapes, cfg: AugmentConfig, pca: IntensityPCA | None = None, n_parts=2,
            extras=None):
    """Reflected and intensity-perturbed copies of (image, landmarks) pairs.

    Returns ``(images, shapes, origin)`` including the originals first;
    ``origin[i]`` is ``(source index, tag)``. ``extras`` (per-image dicts) are
    carried along; a ``theta`` entry flips sign under reflection.
    """
    rng = np.random.default_rng(cfg.seed)
    imgs = [as_image(im) for im in images]
    shps = [as_shape_vector(s) for s in shapes]
    extras = list(extras) if extras is not None else [dict() for _ in imgs]
    out_i, out_s, origin, out_e = list(imgs), list(shps), [(i, "orig") for i in range(len(imgs))], list(extras)
    for axis in cfg.flips:
        for i, (im, s) in enumerate(zip(imgs, shps)):
            dims = (im.shape[1], im.shape[0])
            out_i.append(flip_image(im, axis))
            out_s.append(flip_shape(s, dims, axis, n_parts))
            e = dict(extras[i])
            if e.get("theta") is not None:
                e["theta"] = -e["theta"]
            out_e.append(e)
            origin.append((i, f"flip-{axis}"))
    if cfg.intensity_copies > 0:
        if pca is None:
            pca = IntensityPCA(cfg.n_components, cfg.pca_size, cfg.alpha_std).fit(imgs)
        base = len(out_i)
        for c in range(cfg.intensity_copies):
            for j in range(base):
                out_i.append(pca.perturb(out_i[j], rng))
                out_s.append(out_s[j])
                out_e.append(dict(out_e[j]))
                origin.append((origin[j][0], f"{origin[j][1]}+pca{c}"))
    return out_i, out_s, origin, out_e


def balance_classes(X, y, rng):
    """Randomly undersample the majority class to a 1:1 ratio."""
    y = np.asarray(y)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateInputError("both classes are needed for balancing")
    if pos.size > neg.size:
        pos = np.sort(rng.choice(pos, neg.size, replace=False))
    elif neg.size > pos.size:
        neg = np.sort(rng.choice(neg, pos.size, replace=False))
    keep = np.concatenate([pos, neg])
    return np.asarray(X)[keep], y[keep]


# --- rasterisation -----------------------------------------------------------------

def _segments_intersect(p1, p2, p3, p4):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple_polygon(poly):
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_intersect(a, b, poly[j], poly[(j + 1) % n]):
                return False
    return True


def fill_polygon(poly, dims):
    """Even-odd fill of one closed polygon; a pixel is set when its centre
    (integer coordinates) lies inside."""
    w, h = dims
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((h, w), dtype=bool)
    if len(poly) < 3:
        return mask
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ymin = max(int(np.ceil(y0.min())), 0)
    ymax = min(int(np.floor(y0.max())), h - 1)
    cols = np.arange(w)
    for row in range(ymin, ymax + 1):
        crosses = ((y0 <= row) & (y1 > row)) | ((y1 <= row) & (y0 > row))
        if not crosses.any():
            continue
        t = (row - y0[crosses]) / (y1[crosses] - y0[crosses])
        xs = x0[crosses] + t * (x1[crosses] - x0[crosses])
        count = (xs[None, :] < cols[:, None]).sum(axis=1)
        mask[row] = (count % 2) == 1
    return mask


def shape_parts(shape, n_parts=2):
    pts = as_shape_vector(shape).reshape(-1, 2)
    if len(pts) % n_parts:
        raise DimensionError(f"{len(pts)} landmarks cannot be split into {n_parts} parts")
    return np.split(pts, n_parts)


def rasterize_shape(shape, dims, n_parts=2, validate=True):
    """Binary mask (``(height, width)``) of the union of the shape's closed parts.

    Each part is the polygon through its landmarks in order. With ``validate``
    a self-intersecting part raises; otherwise it is filled even-odd with a warning.
    """
    mask = np.zeros((dims[1], dims[0]), dtype=bool)
    for part in shape_parts(shape, n_parts):
        if not is_simple_polygon(part):
            if validate:
                raise DegenerateInputError("self-intersecting polygon")
            warnings.warn("rasterising a self-intersecting polygon", RuntimeWarning, stacklevel=2)
        mask |= fill_polygon(part, dims)
    return mask
