"""Point-distribution shape models.

Shapes are interleaved ``(x0, y0, x1, y1, ...)`` vectors of ``2M`` pixel
coordinates (origin top-left, x to the right, y down). A shape in image space
is reached from the model frame by the anisotropic similarity

    X = R(theta) @ diag(Sx, Sy) @ x + T

applied landmark-wise, with ``x = mean + eigvecs @ b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_shape_matrix, as_shape_vector
from .exceptions import DegenerateInputError, DimensionError, MissingDetectorError

SHAPE_MODEL_VERSION = 1
PAPER_GROUP_THRESHOLD = 1.22


def wrap_angle(theta):
    """Map an angle into (-pi, pi]."""
    t = math.remainder(float(theta), 2.0 * math.pi)
    return math.pi if t == -math.pi else t


def rotation_matrix(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SpaceParams:
    """Translation, orientation and anisotropic scale of the model-to-image map."""

    T: tuple = (0.0, 0.0)
    theta: float = 0.0
    S: tuple = (1.0, 1.0)

    def __post_init__(self):
        T = tuple(float(v) for v in self.T)
        S = tuple(float(v) for v in self.S)
        if len(T) != 2 or len(S) != 2:
            raise DimensionError("T and S must each have two components")
        if not all(math.isfinite(v) for v in (*T, *S, self.theta)):
            raise ValueError("space parameters must be finite")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def identity(cls):
        return cls()

    @property
    def invertible(self):
        return self.S[0] > 0 and self.S[1] > 0

    @property
    def linear(self):
        return rotation_matrix(self.theta) @ np.diag(self.S)

    def matrix(self):
        """Homogeneous 3x3 form of the transform."""
        A = np.eye(3)
        A[:2, :2] = self.linear
        A[:2, 2] = self.T
        return A

    def apply(self, shape):
        pts = as_shape_vector(shape).reshape(-1, 2)
        return (pts @ self.linear.T + np.asarray(self.T)).reshape(-1)

    def apply_linear(self, shape):
        """Apply the transform without translation (maps displacements)."""
        pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
        return (pts @ self.linear.T).reshape(-1)

    def inverse_apply(self, shape):
        if not self.invertible:
            raise DegenerateInputError(f"space parameters with scale {self.S} are not invertible")
        pts = as_shape_vector(shape).reshape(-1, 2) - np.asarray(self.T)
        inv = np.diag([1.0 / self.S[0], 1.0 / self.S[1]]) @ rotation_matrix(-self.theta)
        return (pts @ inv.T).reshape(-1)

    def to_dict(self):
        return {"T": list(self.T), "theta": self.theta, "S": list(self.S)}

    @classmethod
    def from_dict(cls, d):
        return cls(T=tuple(d["T"]), theta=d["theta"], S=tuple(d["S"]))


@dataclass(frozen=True)
class SimilarityTransform:
    """Isotropic similarity ``p -> scale * R(angle) p + translation``."""

    scale: float
    angle: float
    translation: tuple

    def apply(self, shape):
        pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
        L = self.scale * rotation_matrix(self.angle)
        return (pts @ L.T + np.asarray(self.translation)).reshape(-1)

    def inverse_apply(self, shape):
        pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2) - np.asarray(self.translation)
        L = rotation_matrix(-self.angle) / self.scale
        return (pts @ L.T).reshape(-1)

    def compose(self, other):
        """``self`` after ``other``."""
        R = rotation_matrix(self.angle)
        t = self.scale * R @ np.asarray(other.translation) + np.asarray(self.translation)
        return SimilarityTransform(self.scale * other.scale,
                                   wrap_angle(self.angle + other.angle), tuple(t))

    def inverse(self):
        R = rotation_matrix(-self.angle) / self.scale
        return SimilarityTransform(1.0 / self.scale, wrap_angle(-self.angle),
                                   tuple(-(R @ np.asarray(self.translation))))


@dataclass
class ProcrustesResult:
    aligned: np.ndarray
    transforms: list
    mean: np.ndarray
    residuals: list
    n_iter: int


def _to_complex(X):
    return X[..., 0::2] + 1j * X[..., 1::2]


def _from_complex(Z):
    out = np.empty(Z.shape[:-1] + (2 * Z.shape[-1],))
    out[..., 0::2] = Z.real
    out[..., 1::2] = Z.imag
    return out


def procrustes_align(shapes, tol=1e-7, max_iter=100):
    """Generalized Procrustes alignment with isotropic similarity transforms.

    The mean is normalised to centroid at the origin and unit RMS radius. Each
    iteration is one power-iteration step on ``sum_n z_n z_n^H`` (``z_n`` the
    centred shapes as complex vectors), which makes the summed residual
    ``sum_n min_T ||T(mean) - x_n||^2`` non-increasing. ``transforms[n]`` maps the
    mean onto shape ``n``; ``aligned[n]`` is shape ``n`` mapped back by its inverse.
    """
    X = as_shape_matrix(shapes)
    N, twoM = X.shape
    M = twoM // 2
    Z = _to_complex(X)
    centroids = Z.mean(axis=1)
    Zc = Z - centroids[:, None]
    norms2 = np.sum(np.abs(Zc) ** 2, axis=1)
    if np.any(norms2 <= 1e-24 * max(1.0, float(np.max(np.abs(Z)) ** 2))):
        raise DegenerateInputError("a shape has all landmarks coincident")

    def normalise(m):
        return m * math.sqrt(M) / np.linalg.norm(m)

    def residual(m):
        proj = Zc @ np.conj(m)
        return float(np.sum(norms2 - np.abs(proj) ** 2 / np.sum(np.abs(m) ** 2)))

    mean = normalise(Zc[0])
    residuals = [residual(mean)]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # C @ mean with C = sum_n z_n z_n^H
        new = normalise(Zc.T @ (np.conj(Zc) @ mean))
        change = np.sqrt(np.mean(np.abs(new - mean) ** 2))
        mean = new
        residuals.append(residual(mean))
        if change < tol:
            break

    a = (np.conj(Zc) @ mean).conj() / np.sum(np.abs(mean) ** 2)
    transforms = [
        SimilarityTransform(float(abs(an)), wrap_angle(float(np.angle(an))),
                            (float(c.real), float(c.imag)))
        for an, c in zip(a, centroids)
    ]
    aligned = _from_complex(Zc / a[:, None])
    return ProcrustesResult(aligned=aligned, transforms=transforms, mean=_from_complex(mean),
                            residuals=residuals, n_iter=n_iter)


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """PCA model of aligned shapes: ``mean`` (2M), ``eigvecs`` (2M x K), ``eigvals`` (K)."""

    mean: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    energy_fraction: float = 0.95
    group_id: int = 0
    all_eigvals: np.ndarray | None = None
    n_parts: int = 2

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        vecs = np.array(self.eigvecs, dtype=np.float64).reshape(mean.size, -1)
        vals = np.array(self.eigvals, dtype=np.float64).reshape(-1)
        if vecs.shape[1] != vals.size:
            raise DimensionError("eigvecs and eigvals disagree on the mode count")
        allv = None if self.all_eigvals is None else np.array(self.all_eigvals, dtype=np.float64)
        for name, arr in (("mean", mean), ("eigvecs", vecs), ("eigvals", vals), ("all_eigvals", allv)):
            if arr is not None:
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def n_landmarks(self):
        return self.mean.size // 2

    @property
    def n_modes(self):
        return self.eigvals.size

    @property
    def std(self):
        return np.sqrt(np.maximum(self.eigvals, 0.0))

    def truncated(self, k):
        if k > self.n_modes:
            raise DimensionError(f"model has only {self.n_modes} modes")
        return ShapeModel(self.mean, self.eigvecs[:, :k], self.eigvals[:k], self.energy_fraction,
                          self.group_id, self.all_eigvals, self.n_parts)

    def to_dict(self):
        return {
            "version": SHAPE_MODEL_VERSION,
            "M": self.n_landmarks,
            "mean": self.mean.tolist(),
            "eigvecs": self.eigvecs.ravel(order="F").tolist(),
            "eigvals": self.eigvals.tolist(),
            "energy_fraction": self.energy_fraction,
            "group_id": self.group_id,
            "n_parts": self.n_parts,
            "all_eigvals": None if self.all_eigvals is None else self.all_eigvals.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SHAPE_MODEL_VERSION:
            raise ValueError(f"unsupported shape model version {d.get('version')!r}")
        M = int(d["M"])
        vals = np.asarray(d["eigvals"], dtype=np.float64)
        vecs = np.asarray(d["eigvecs"], dtype=np.float64).reshape((2 * M, vals.size), order="F")
        return cls(np.asarray(d["mean"]), vecs, vals, float(d["energy_fraction"]),
                   int(d["group_id"]), d.get("all_eigvals"), int(d.get("n_parts", 2)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def modes_for_energy(eigvals, energy_fraction):
    """Smallest K whose leading eigenvalues hold ``energy_fraction`` of the total."""
    vals = np.clip(np.asarray(eigvals, dtype=np.float64), 0.0, None)
    total = vals.sum()
    if total <= 0:
        return 0
    frac = np.cumsum(vals) / total
    return int(np.searchsorted(frac, energy_fraction - 1e-12) + 1)


def build_ssm(aligned, energy_fraction=0.95, group_id=0, n_modes=None, n_parts=2):
    """PCA of aligned shapes via SVD of the centred data matrix.

    ``n_modes`` overrides the energy criterion when given.
    """
    X = as_shape_matrix(aligned)
    N = X.shape[0]
    if N < 2:
        raise DegenerateInputError("need at least two shapes to build a shape model")
    if not 0 < energy_fraction <= 1:
        raise ValueError("energy_fraction must lie in (0, 1]")
    mean = X.mean(axis=0)
    D = X - mean
    _, sv, Vt = np.linalg.svd(D, full_matrices=False)
    eigvals = sv ** 2 / (N - 1)
    scale = eigvals[0] if eigvals.size else 0.0
    eigvals = np.where(eigvals > 1e-13 * max(scale, 1e-300), eigvals, 0.0)
    V = Vt.T
    # deterministic sign: largest-magnitude component positive
    pivot = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[pivot, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    K = modes_for_energy(eigvals, energy_fraction) if n_modes is None else int(n_modes)
    if K > int(np.count_nonzero(eigvals)) and n_modes is None:
        K = int(np.count_nonzero(eigvals))
    if K > V.shape[1]:
        raise DimensionError(f"requested {K} modes but only {V.shape[1]} are available")
    return ShapeModel(mean=mean, eigvecs=V[:, :K], eigvals=eigvals[:K],
                      energy_fraction=energy_fraction, group_id=group_id,
                      all_eigvals=eigvals, n_parts=n_parts)


def _weights(model, b):
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if b.ndim != 1 or b.size > model.n_modes:
        raise DimensionError(f"got {b.size} weights for a model with {model.n_modes} modes")
    return b


def synthesize_shape(model: ShapeModel, b, sp: SpaceParams | None = None):
    """``A_space (mean + P b)``; shorter ``b`` leaves the trailing modes at zero."""
    b = _weights(model, b)
    x = model.mean + model.eigvecs[:, :b.size] @ b
    return x if sp is None else sp.apply(x)


def mode_recursion(model: ShapeModel, b):
    """Yield ``x_0 = mean`` and ``x_k = x_{k-1} + p_k b_k`` for each supplied weight."""
    b = _weights(model, b)
    x = model.mean.copy()
    yield x.copy()
    for k in range(b.size):
        x = x + model.eigvecs[:, k] * b[k]
        yield x.copy()


def project_shape(model: ShapeModel, X, sp: SpaceParams | None = None):
    """Mode weights ``P^T (A_space^{-1} X - mean)``."""
    x = as_shape_vector(X, model.n_landmarks)
    if sp is not None:
        x = sp.inverse_apply(x)
    return model.eigvecs.T @ (x - model.mean)


def clamp_weights(b, eigvals, n_std=3.0):
    b = np.asarray(b, dtype=np.float64)
    vals = np.asarray(eigvals, dtype=np.float64)
    if b.shape != vals.shape:
        raise DimensionError("weights and eigenvalues have different lengths")
    lim = n_std * np.sqrt(np.maximum(vals, 0.0))
    return np.clip(b, -lim, lim)


def bounding_lines(shape):
    """``(l1, l2, l3, l4)`` = (top row, bottom row, left column, right column)."""
    pts = as_shape_vector(shape).reshape(-1, 2)
    return (float(pts[:, 1].min()), float(pts[:, 1].max()),
            float(pts[:, 0].min()), float(pts[:, 0].max()))


def aspect_ratio(S):
    return float(S[0]) / float(S[1])


def fit_space_to_box(mean, T_box, S_box, theta, n_iter=100, tol=1e-12):
    """Space parameters placing ``mean`` so that its axis-aligned box is ``(T_box, S_box)``.

    The box of ``R(theta) diag(S) mean`` is positively homogeneous in ``S``; the
    fixed point ``S <- S * S_box / extent(S)`` converges for the modest
    rotations the detectors scan.
    """
    pts = as_shape_vector(mean).reshape(-1, 2)
    if S_box[0] <= 0 or S_box[1] <= 0:
        raise DegenerateInputError(f"box extent {tuple(S_box)} is not positive")
    ext0 = pts.max(axis=0) - pts.min(axis=0)
    if np.any(ext0 <= 0):
        raise DegenerateInputError("mean shape has zero extent")
    R = rotation_matrix(theta)
    target = np.asarray(S_box, dtype=np.float64)
    S = target / ext0
    for _ in range(n_iter):
        q = pts @ (R @ np.diag(S)).T
        ext = q.max(axis=0) - q.min(axis=0)
        ratio = target / ext
        S = S * ratio
        if np.max(np.abs(ratio - 1.0)) < tol:
            break
    q = pts @ (R @ np.diag(S)).T
    centre = 0.5 * (q.max(axis=0) + q.min(axis=0))
    T = np.asarray(T_box, dtype=np.float64) - centre
    return SpaceParams(T=tuple(T), theta=theta, S=tuple(S))


@dataclass
class GroupSplit:
    threshold: float
    groups: np.ndarray
    means: tuple = ()
    stds: tuple = ()
    weights: tuple = ()
    method: str = "em"

    def assign(self, ratio):
        return int(float(ratio) > self.threshold)


class SingleGroupFallback(DegenerateInputError):
    """Aspect ratios do not support a two-group split."""


def _equal_posterior_point(w, mu, sd):
    a = 0.5 / sd[1] ** 2 - 0.5 / sd[0] ** 2
    b = mu[0] / sd[0] ** 2 - mu[1] / sd[1] ** 2
    c = (-0.5 * mu[0] ** 2 / sd[0] ** 2 + 0.5 * mu[1] ** 2 / sd[1] ** 2
         + math.log(w[0] / sd[0]) - math.log(w[1] / sd[1]))
    lo, hi = sorted(mu)
    if abs(a) < 1e-12 * max(abs(b), 1e-300):
        roots = [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            return 0.5 * (lo + hi)
        r = math.sqrt(disc)
        roots = [(-b - r) / (2 * a), (-b + r) / (2 * a)]
    inside = [x for x in roots if lo <= x <= hi]
    if inside:
        return inside[0]
    mid = 0.5 * (lo + hi)
    return min(roots, key=lambda x: abs(x - mid))


def cluster_aspect_ratios(ratios, threshold=None, max_iter=500, tol=1e-10):
    """Two-component 1-D Gaussian mixture on box aspect ratios.

    A fixed ``threshold`` (e.g. ``PAPER_GROUP_THRESHOLD``) skips EM. Otherwise
    the split is the point of equal posterior between the fitted components.
    Group 0 lies below the threshold, group 1 above it.
    """
    r = np.asarray(ratios, dtype=np.float64).reshape(-1)
    if threshold is not None:
        return GroupSplit(float(threshold), (r > threshold).astype(int), method="fixed")
    if r.size < 4:
        raise ValueError("need at least four aspect ratios to cluster")
    spread = float(r.std())
    if spread <= 1e-12 * max(1.0, abs(float(r.mean()))):
        raise SingleGroupFallback("all aspect ratios are identical")
    mu = np.quantile(r, [0.25, 0.75])
    var = np.full(2, spread ** 2)
    w = np.full(2, 0.5)
    floor = 1e-6 * spread ** 2
    prev = -np.inf
    for _ in range(max_iter):
        logp = (np.log(w) - 0.5 * np.log(2 * np.pi * var)
                - 0.5 * (r[:, None] - mu) ** 2 / var)
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-9):
            raise SingleGroupFallback("a mixture component collapsed")
        w = nk / r.size
        mu = (resp * r[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (r[:, None] - mu) ** 2).sum(axis=0) / nk, floor)
        ll = float(lse.sum())
        if ll - prev < tol * max(1.0, abs(ll)):
            break
        prev = ll
    order = np.argsort(mu)
    mu, var, w = mu[order], var[order], w[order]
    sd = np.sqrt(var)
    thr = _equal_posterior_point(w, mu, sd)
    groups = (r > thr).astype(int)
    if groups.min() == groups.max():
        raise SingleGroupFallback("equal-posterior point does not separate the data")
    return GroupSplit(float(thr), groups, tuple(mu), tuple(sd), tuple(w), method="em")


def select_model(ratio, split: GroupSplit | None, models):
    """Pick the group model for a detected aspect ratio (ties go to group 0)."""
    group = 0 if split is None else split.assign(ratio)
    try:
        return models[group]
    except (KeyError, IndexError):
        raise MissingDetectorError(f"no shape model for group {group}") from None


def _arc_lengths(poly):
    seg = np.diff(poly, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    return np.concatenate([[0.0], np.cumsum(lengths)]), lengths


def _point_at(poly, cum, s):
    s = np.mod(s, cum[-1])
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 2)
    seglen = cum[i + 1] - cum[i]
    t = np.where(seglen > 0, (s - cum[i]) / np.where(seglen > 0, seglen, 1.0), 0.0)
    return poly[i] + t[..., None] * (poly[i + 1] - poly[i])


def _locate_on_polyline(poly, cum, p):
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    t = np.clip(np.sum((p - a) * ab, axis=1) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.hypot(*(proj - p).T)
    i = int(np.argmin(d))
    return cum[i] + t[i] * (cum[i + 1] - cum[i]), float(d[i])


def _interpolate_side(primary, contour, count, tol):
    P = np.asarray(primary, dtype=np.float64).reshape(-1, 2)
    C = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    if len(C) < 4 or np.hypot(*(C[0] - C[-1])) > 1e-9:
        raise DegenerateInputError("contour must be a closed polyline (last vertex == first)")
    if count < len(P):
        raise ValueError("count is smaller than the number of primary landmarks")
    if count == len(P):
        return P.copy()
    cum, _ = _arc_lengths(C)
    L = cum[-1]
    s = []
    for p in P:
        si, dist = _locate_on_polyline(C, cum, p)
        if dist > tol:
            raise ValueError(f"primary landmark {p.tolist()} lies {dist:.2f} px off the contour")
        s.append(si)
    s = np.asarray(s)
    gaps = np.mod(np.roll(s, -1) - s, L)
    if np.any(gaps <= 1e-9 * L):
        raise DegenerateInputError("coincident primary landmarks")
    if abs(gaps.sum() - L) > 1e-6 * L:
        raise ValueError("primary landmarks are not ordered along the contour")
    n_sec = count - len(P)
    share = gaps / L * n_sec
    alloc = np.floor(share).astype(int)
    for j in np.argsort(-(share - alloc), kind="stable")[: n_sec - alloc.sum()]:
        alloc[j] += 1
    out = []
    for j, p in enumerate(P):
        out.append(p)
        k = np.arange(1, alloc[j] + 1)
        if k.size:
            out.extend(_point_at(C, cum, s[j] + gaps[j] * k / (alloc[j] + 1)))
    return np.asarray(out)


def interpolate_landmarks(primary, contour, count=72, tol=1.0):
    """Place equidistant secondary landmarks between primary ones along a contour.

    ``primary`` and ``contour`` are either one side (``(P, 2)`` array and closed
    ``(C, 2)`` polyline) or sequences of those, one per side. Secondaries are
    shared out between the primary-to-primary segments in proportion to their
    arc length and spaced evenly inside each segment. Returns the flat shape
    vector of all sides concatenated.
    """
    single = isinstance(primary, np.ndarray) and primary.ndim == 2
    sides_p = [primary] if single else list(primary)
    sides_c = [contour] if single else list(contour)
    if len(sides_p) != len(sides_c):
        raise DimensionError("one contour per side is required")
    return np.concatenate([_interpolate_side(p, c, count, tol).reshape(-1)
                           for p, c in zip(sides_p, sides_c)])


class PointDistributionModel(TransformerMixin, BaseEstimator):
    """Estimator wrapper: Procrustes alignment followed by PCA.

    ``transform`` maps image-space shapes to mode weights (each shape is first
    brought into the model frame by its best similarity), ``inverse_transform``
    maps weights back to model-frame shapes.
    """

    def __init__(self, energy_fraction=0.95, n_modes=None, tol=1e-7, max_iter=100):
        self.energy_fraction = energy_fraction
        self.n_modes = n_modes
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = as_shape_matrix(X)
        self.procrustes_ = procrustes_align(X, self.tol, self.max_iter)
        self.model_ = build_ssm(self.procrustes_.aligned, self.energy_fraction, n_modes=self.n_modes)
        self.n_features_in_ = X.shape[1]
        return self

    def _to_model_frame(self, shape):
        # least-squares similarity of the shape onto the mean, closed form in complex numbers
        z = _to_complex(shape[None, :])[0]
        m = _to_complex(self.model_.mean[None, :])[0]
        zc, mc = z - z.mean(), m - m.mean()
        denom = np.vdot(zc, zc).real
        if denom <= 0:
            raise DegenerateInputError("a shape has all landmarks coincident")
        a = np.vdot(zc, mc) / denom
        return _from_complex((a * zc + m.mean())[None, :])[0]

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = as_shape_matrix(X)
        return np.vstack([project_shape(self.model_, self._to_model_frame(x)) for x in X])

    def inverse_transform(self, B):
        check_is_fitted(self, "model_")
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        return np.vstack([synthesize_shape(self.model_, b) for b in B])
