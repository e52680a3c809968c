"""Input checking helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def as_shape_vector(shape, n_landmarks=None):
    """Return ``shape`` as a flat float64 ``(2M,)`` vector.

    Accepts either an interleaved ``(2M,)`` vector or an ``(M, 2)`` point array.
    """
    arr = np.asarray(shape, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 2:
        arr = arr.reshape(-1)
    if arr.ndim != 1 or arr.size % 2 or arr.size == 0:
        raise DimensionError(f"expected a (2M,) or (M, 2) landmark array, got shape {np.shape(shape)}")
    if n_landmarks is not None and arr.size != 2 * n_landmarks:
        raise DimensionError(f"expected {n_landmarks} landmarks, got {arr.size // 2}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("landmark coordinates must be finite")
    return arr


def as_shape_matrix(shapes):
    """Stack a collection of shapes into an ``(N, 2M)`` float64 array."""
    if isinstance(shapes, np.ndarray) and shapes.ndim == 2:
        arr = shapes.astype(np.float64, copy=False)
    elif isinstance(shapes, np.ndarray) and shapes.ndim == 3 and shapes.shape[2] == 2:
        arr = shapes.reshape(shapes.shape[0], -1).astype(np.float64, copy=False)
    else:
        rows = [as_shape_vector(s) for s in shapes]
        if not rows:
            raise ValueError("no shapes given")
        sizes = {r.size for r in rows}
        if len(sizes) != 1:
            raise DimensionError(f"shapes have differing landmark counts: {sorted(s // 2 for s in sizes)}")
        arr = np.vstack(rows)
    if arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[1] % 2:
        raise DimensionError(f"bad shape matrix dimensions {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("landmark coordinates must be finite")
    return arr


def as_image(image):
    """Return a 2-D float64 view of ``image`` (a ``GrayImage`` or array)."""
    pixels = getattr(image, "pixels", image)
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) == 0:
        raise DimensionError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def as_image_stack(images):
    if isinstance(images, np.ndarray) and images.ndim == 3:
        return images.astype(np.float64, copy=False)
    stack = [as_image(im) for im in images]
    if not stack:
        raise ValueError("no images given")
    dims = {im.shape for im in stack}
    if len(dims) != 1:
        raise DimensionError(f"images have differing dimensions: {sorted(dims)}")
    return np.stack(stack)


def check_vector_length(x, expected, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expected:
        raise DimensionError(f"{what} has length {x.shape[-1]}, expected {expected}")
    return x
