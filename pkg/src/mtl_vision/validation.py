"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .core import Sample, ShapeError


def check_image(image) -> np.ndarray:
    """Return ``image`` as a contiguous uint8 H x W x 3 array; grayscale is replicated."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError("image has zero area")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and (np.nanmin(arr) < 0 or np.nanmax(arr) > 255):
            raise ValueError("float images must lie in [0, 255]")
        if np.issubdtype(arr.dtype, np.floating) and not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


def check_images(images) -> List[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim in (2, 3):
        images = [images]
    out = [check_image(im) for im in images]
    if not out:
        raise ValueError("no images given")
    return out


def check_samples(samples: Sequence[Sample], require_captions: bool = False) -> List[Sample]:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples given")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"element {i} is {type(s).__name__}, expected Sample")
        if s.image.dtype != np.uint8:
            raise ShapeError(f"sample {i}: image dtype {s.image.dtype}, expected uint8")
    if require_captions and not any(s.captions for s in samples):
        raise ValueError("no sample carries a caption")
    return samples
