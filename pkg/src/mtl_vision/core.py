"""Geometry primitives and annotation types shared by every stage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

NUM_INSTANCE_CLASSES = 80
NUM_STUFF_CLASSES = 91
NUM_SEMANTIC_CLASSES = NUM_INSTANCE_CLASSES + NUM_STUFF_CLASSES + 1
UNLABELED_ID = NUM_SEMANTIC_CLASSES - 1
MAX_CAPTIONS = 5


class EmptyMask(ValueError):
    pass


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    category: int

    def __post_init__(self):
        if not 0 <= self.category < NUM_INSTANCE_CLASSES:
            raise ValueError(f"instance category {self.category} outside [0, {NUM_INSTANCE_CLASSES})")


@dataclass
class InstanceAnnotation:
    labeled_box: LabeledBox
    mask: np.ndarray  # bool H x W

    @property
    def box(self) -> Box:
        return self.labeled_box.box

    @property
    def category(self) -> int:
        return self.labeled_box.category

    def with_mask(self, mask: np.ndarray) -> "InstanceAnnotation":
        """Return a copy whose box is recomputed as the tight bbox of ``mask``."""
        return InstanceAnnotation(LabeledBox(mask_to_bbox(mask), self.category), mask)


@dataclass
class Detection:
    box: Box
    score: float
    category: int
    mask_coefficients: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class Sample:
    """One image with every annotation the four tasks consume.

    ``image`` is uint8 H x W x 3 (RGB), ``semantic`` is an integer H x W raster
    over the merged 172-category space.
    """

    image: np.ndarray
    instances: List[InstanceAnnotation]
    semantic: np.ndarray
    captions: List[str] = field(default_factory=list)
    image_id: int = 0

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"image must be H x W x 3, got {self.image.shape}")
        if self.semantic.shape != self.image.shape[:2]:
            raise ShapeError(
                f"semantic raster {self.semantic.shape} does not match image {self.image.shape[:2]}")
        if len(self.captions) > MAX_CAPTIONS:
            raise ValueError(f"at most {MAX_CAPTIONS} captions per image, got {len(self.captions)}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def copy(self, **changes) -> "Sample":
        return replace(self, **changes)


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Category-aware greedy suppression; output sorted by descending score."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    # stable sort keeps input order among equal scores
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: List[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.category != d.category or box_iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def mask_to_bbox(mask: np.ndarray) -> Box:
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMask("mask has no set pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def clip_box(b: Box, width: float, height: float) -> Optional[Box]:
    if width <= 0 or height <= 0:
        raise ValueError("canvas dimensions must be positive")
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def box_mask(box: Box, height: int, width: int) -> np.ndarray:
    """Rasterize an integer-aligned box as a bool mask."""
    m = np.zeros((height, width), dtype=bool)
    m[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = True
    return m
