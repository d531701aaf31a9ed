"""Strong (vision) and weak (captioning) augmentation pipelines.

Every strong-pipeline op recomputes instance boxes from the transformed
masks, so a stored box is always the tight bbox of its mask.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .core import UNLABELED_ID, InstanceAnnotation, Sample, ShapeError

logger = logging.getLogger(__name__)

FILL_VALUE = 114
MIN_VISIBLE_FRACTION = 0.10


class ArityError(ValueError):
    pass


@dataclass
class AugConfig:
    mosaic_prob: float = 1.0
    mixup_prob: float = 0.15
    cutout_prob: float = 0.0
    copy_paste_prob: float = 0.0
    perspective_prob: float = 1.0
    degrees: float = 0.0
    translate: float = 0.1
    scale: Tuple[float, float] = (0.5, 1.5)
    shear: float = 0.0
    perspective: float = 0.0
    mixup_beta: Tuple[float, float] = (32.0, 32.0)
    cutout_regions: int = 4
    target_size: int = 640
    seed: int = 0

    def __post_init__(self):
        self.scale = tuple(self.scale)
        self.mixup_beta = tuple(self.mixup_beta)
        for name in ("mosaic_prob", "mixup_prob", "cutout_prob", "copy_paste_prob", "perspective_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError(f"invalid scale range {self.scale}")


@dataclass
class PerspectiveParams:
    """Concrete (already sampled) warp parameters."""

    degrees: float = 0.0
    scale: float = 1.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    perspective_x: float = 0.0
    perspective_y: float = 0.0

    @classmethod
    def sample(cls, cfg: AugConfig, rng: np.random.Generator, size: Tuple[int, int]) -> "PerspectiveParams":
        w, h = size
        return cls(
            degrees=rng.uniform(-cfg.degrees, cfg.degrees),
            scale=rng.uniform(cfg.scale[0], cfg.scale[1]),
            shear_x=rng.uniform(-cfg.shear, cfg.shear),
            shear_y=rng.uniform(-cfg.shear, cfg.shear),
            translate_x=rng.uniform(-cfg.translate, cfg.translate) * w,
            translate_y=rng.uniform(-cfg.translate, cfg.translate) * h,
            perspective_x=rng.uniform(-cfg.perspective, cfg.perspective),
            perspective_y=rng.uniform(-cfg.perspective, cfg.perspective),
        )


@dataclass
class AugmentedViews:
    strong: List[Sample]
    weak: List[Sample]
    provenance: List[int]
    sources: List[List[int]] = field(default_factory=list)


def perspective_matrix(params: PerspectiveParams, in_size: Tuple[int, int],
                       out_size: Tuple[int, int], border: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """3x3 matrix: centre, perspective, rotate+scale, shear, then translate to the output frame."""
    w, h = in_size
    ow, oh = out_size
    C = np.eye(3)
    C[0, 2], C[1, 2] = -w / 2, -h / 2
    P = np.eye(3)
    P[2, 0], P[2, 1] = params.perspective_x, params.perspective_y
    R = np.eye(3)
    R[:2] = cv2.getRotationMatrix2D(angle=params.degrees, center=(0, 0), scale=params.scale)
    S = np.eye(3)
    S[0, 1] = math.tan(math.radians(params.shear_x))
    S[1, 0] = math.tan(math.radians(params.shear_y))
    T = np.eye(3)
    T[0, 2] = w / 2 + params.translate_x + border[0]
    T[1, 2] = h / 2 + params.translate_y + border[1]
    return T @ S @ R @ P @ C


def _warp(arr: np.ndarray, M: np.ndarray, out_size: Tuple[int, int], interp: int, fill) -> np.ndarray:
    if np.allclose(M[2], [0, 0, 1]):
        return cv2.warpAffine(arr, M[:2], dsize=out_size, flags=interp, borderValue=fill)
    return cv2.warpPerspective(arr, M, dsize=out_size, flags=interp, borderValue=fill)


def _area_scale(M: np.ndarray) -> float:
    return abs(float(np.linalg.det(M[:2, :2])))


def warp_sample(sample: Sample, M: np.ndarray, out_size: Tuple[int, int]) -> Sample:
    """Apply one homography to pixels, instance masks and the semantic raster.

    Instances keeping less than 10% of their expected (area-scaled) size are dropped.
    """
    ow, oh = out_size
    if (sample.width, sample.height) == (ow, oh) and np.array_equal(M, np.eye(3)):
        return sample
    image = _warp(sample.image, M, out_size, cv2.INTER_LINEAR, (FILL_VALUE,) * 3)
    semantic = _warp(sample.semantic.astype(np.int32), M, out_size, cv2.INTER_NEAREST,
                     UNLABELED_ID).astype(sample.semantic.dtype)
    ratio = _area_scale(M)
    instances = []
    for inst in sample.instances:
        mask = _warp(inst.mask.astype(np.uint8), M, out_size, cv2.INTER_NEAREST, 0).astype(bool)
        area = int(mask.sum())
        if area == 0 or area < MIN_VISIBLE_FRACTION * inst.mask.sum() * ratio:
            continue
        instances.append(inst.with_mask(mask))
    return sample.copy(image=image, semantic=semantic, instances=instances)


def random_perspective(sample: Sample, params: PerspectiveParams,
                       out_size: Optional[Tuple[int, int]] = None,
                       border: Tuple[float, float] = (0.0, 0.0)) -> Sample:
    out_size = out_size or (sample.width, sample.height)
    M = perspective_matrix(params, (sample.width, sample.height), out_size, border)
    return warp_sample(sample, M, out_size)


def _resize_sample(sample: Sample, new_w: int, new_h: int) -> Sample:
    if (new_w, new_h) == (sample.width, sample.height):
        return sample
    interp = cv2.INTER_AREA if new_w < sample.width else cv2.INTER_LINEAR
    image = cv2.resize(sample.image, (new_w, new_h), interpolation=interp)
    semantic = cv2.resize(sample.semantic.astype(np.int32), (new_w, new_h),
                          interpolation=cv2.INTER_NEAREST).astype(sample.semantic.dtype)
    instances = []
    for inst in sample.instances:
        mask = cv2.resize(inst.mask.astype(np.uint8), (new_w, new_h),
                          interpolation=cv2.INTER_NEAREST).astype(bool)
        if mask.any():
            instances.append(inst.with_mask(mask))
    return sample.copy(image=image, semantic=semantic, instances=instances)


def letterbox_geometry(width: int, height: int, target: int) -> Tuple[float, int, int, int, int]:
    """Return (scale, new_w, new_h, pad_left, pad_top) for an aspect-preserving resize+pad."""
    scale = min(target / width, target / height)
    new_w, new_h = int(round(width * scale)), int(round(height * scale))
    return scale, new_w, new_h, (target - new_w) // 2, (target - new_h) // 2


def weak_transform(sample: Sample, target_size: int) -> Sample:
    """Aspect-preserving resize and symmetric gray padding to ``target_size`` squared."""
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    _, new_w, new_h, left, top = letterbox_geometry(sample.width, sample.height, target_size)
    resized = _resize_sample(sample, new_w, new_h)
    if (new_w, new_h) == (target_size, target_size):
        return resized.copy(captions=sample.captions)
    image = np.full((target_size, target_size, 3), FILL_VALUE, dtype=np.uint8)
    image[top:top + new_h, left:left + new_w] = resized.image
    semantic = np.full((target_size, target_size), UNLABELED_ID, dtype=resized.semantic.dtype)
    semantic[top:top + new_h, left:left + new_w] = resized.semantic
    instances = []
    for inst in resized.instances:
        mask = np.zeros((target_size, target_size), dtype=bool)
        mask[top:top + new_h, left:left + new_w] = inst.mask
        instances.append(inst.with_mask(mask))
    return sample.copy(image=image, semantic=semantic, instances=instances, captions=sample.captions)


def mosaic4(samples: Sequence[Sample], cfg: AugConfig, rng: np.random.Generator,
            center: Optional[Tuple[int, int]] = None, perspective: bool = True) -> Sample:
    """Tile four samples around a random centre on a 2x canvas.

    With ``perspective=False`` the raw 2x canvas is returned; otherwise it is
    warped by a sampled perspective and cropped to ``target_size``.
    """
    if len(samples) != 4:
        raise ArityError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    s = cfg.target_size
    if center is None:
        xc, yc = (int(rng.uniform(s // 2, 3 * s // 2)) for _ in range(2))
    else:
        xc, yc = center
    canvas = np.full((2 * s, 2 * s, 3), FILL_VALUE, dtype=np.uint8)
    sem = np.full((2 * s, 2 * s), UNLABELED_ID, dtype=np.int64)
    instances: List[InstanceAnnotation] = []
    for i, smp in enumerate(samples):
        r = s / max(smp.width, smp.height)
        smp = _resize_sample(smp, max(1, int(round(smp.width * r))), max(1, int(round(smp.height * r))))
        h, w = smp.height, smp.width
        if i == 0:
            x1a, y1a, x2a, y2a = max(xc - w, 0), max(yc - h, 0), xc, yc
            x1b, y1b, x2b, y2b = w - (x2a - x1a), h - (y2a - y1a), w, h
        elif i == 1:
            x1a, y1a, x2a, y2a = xc, max(yc - h, 0), min(xc + w, 2 * s), yc
            x1b, y1b, x2b, y2b = 0, h - (y2a - y1a), min(w, x2a - x1a), h
        elif i == 2:
            x1a, y1a, x2a, y2a = max(xc - w, 0), yc, xc, min(2 * s, yc + h)
            x1b, y1b, x2b, y2b = w - (x2a - x1a), 0, w, min(y2a - y1a, h)
        else:
            x1a, y1a, x2a, y2a = xc, yc, min(xc + w, 2 * s), min(2 * s, yc + h)
            x1b, y1b, x2b, y2b = 0, 0, min(w, x2a - x1a), min(y2a - y1a, h)
        canvas[y1a:y2a, x1a:x2a] = smp.image[y1b:y2b, x1b:x2b]
        sem[y1a:y2a, x1a:x2a] = smp.semantic[y1b:y2b, x1b:x2b]
        for inst in smp.instances:
            mask = np.zeros((2 * s, 2 * s), dtype=bool)
            mask[y1a:y2a, x1a:x2a] = inst.mask[y1b:y2b, x1b:x2b]
            area = int(mask.sum())
            if area == 0 or area < MIN_VISIBLE_FRACTION * inst.mask.sum():
                continue
            instances.append(inst.with_mask(mask))
    out = samples[0].copy(image=canvas, semantic=sem.astype(samples[0].semantic.dtype),
                          instances=instances)
    if not perspective:
        return out
    params = PerspectiveParams.sample(cfg, rng, (s, s))
    M = perspective_matrix(params, (2 * s, 2 * s), (s, s), border=(-s / 2, -s / 2))
    return warp_sample(out, M, (s, s))


def mixup(a: Sample, b: Sample, beta_params: Tuple[float, float], rng: np.random.Generator,
          ratio: Optional[float] = None) -> Sample:
    """Pixel blend ``r*a + (1-r)*b``; labels are the union, semantics from the heavier image."""
    if a.image.shape != b.image.shape:
        raise ShapeError(f"mixup needs equal resolutions, got {a.image.shape} and {b.image.shape}")
    r = float(rng.beta(*beta_params)) if ratio is None else float(ratio)
    blended = a.image.astype(np.float64) * r + b.image.astype(np.float64) * (1.0 - r)
    image = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    semantic = (a if r >= 0.5 else b).semantic.copy()
    return a.copy(image=image, semantic=semantic, instances=list(a.instances) + list(b.instances))


def cutout(sample: Sample, cfg: AugConfig, rng: np.random.Generator,
           regions: Optional[Sequence[Tuple[int, int, int, int]]] = None) -> Sample:
    """Fill rectangles with gray; annotations are left untouched.

    ``regions`` are explicit ``(x1, y1, x2, y2)`` rectangles; when omitted,
    ``cfg.cutout_regions`` rectangles of random size are drawn.
    """
    h, w = sample.height, sample.width
    if regions is None:
        regions = []
        for _ in range(cfg.cutout_regions):
            frac = rng.uniform(0.03, 0.25)
            ch, cw = max(1, int(h * frac)), max(1, int(w * frac))
            x1, y1 = int(rng.integers(0, w)), int(rng.integers(0, h))
            regions.append((x1, y1, min(w, x1 + cw), min(h, y1 + ch)))
    if not regions:
        return sample
    image = sample.image.copy()
    for x1, y1, x2, y2 in regions:
        image[max(0, y1):max(0, y2), max(0, x1):max(0, x2)] = FILL_VALUE
    return sample.copy(image=image)


def copy_paste(dst: Sample, src: Sample, rng: np.random.Generator,
               select: Optional[Sequence[int]] = None, prob: float = 0.5) -> Sample:
    """Composite source instances onto ``dst`` and occlude what lies beneath.

    ``select`` lists source instance indices to paste; by default each one
    is chosen independently with probability ``prob``.
    """
    if not src.instances:
        logger.warning("copy_paste source %s has no instance masks; skipped", src.image_id)
        return dst
    if (src.width, src.height) != (dst.width, dst.height):
        src = _resize_sample(src, dst.width, dst.height)
    if select is None:
        select = [i for i in range(len(src.instances)) if rng.random() < prob]
    if not select:
        return dst
    image = dst.image.copy()
    semantic = dst.semantic.copy()
    instances = list(dst.instances)
    for idx in select:
        pasted = src.instances[idx]
        m = pasted.mask
        image[m] = src.image[m]
        semantic[m] = pasted.category
        survivors = []
        for inst in instances:
            remaining = inst.mask & ~m
            if remaining.any():
                survivors.append(inst if remaining.sum() == inst.mask.sum() else inst.with_mask(remaining))
        instances = survivors + [pasted]
    return dst.copy(image=image, semantic=semantic, instances=instances)


def _strong_base(sample: Sample, cfg: AugConfig, rng: np.random.Generator) -> Sample:
    out = weak_transform(sample, cfg.target_size)
    if rng.random() < cfg.perspective_prob:
        params = PerspectiveParams.sample(cfg, rng, (out.width, out.height))
        out = random_perspective(out, params)
    return out


def strong_transform(batch: Sequence[Sample], index: int, cfg: AugConfig,
                     rng: np.random.Generator) -> Tuple[Sample, List[int]]:
    """Strong pipeline for ``batch[index]``; partners are drawn from ``batch``.

    Returns the augmented sample and the image ids that contributed to it.
    """
    anchor = batch[index]
    sources = [anchor.image_id]
    n = len(batch)
    if rng.random() < cfg.mosaic_prob:
        others = [batch[int(j)] for j in rng.integers(0, n, size=3)]
        sources += [o.image_id for o in others]
        out = mosaic4([anchor] + others, cfg, rng)
    else:
        out = _strong_base(anchor, cfg, rng)
    if rng.random() < cfg.copy_paste_prob:
        partner = batch[int(rng.integers(0, n))]
        sources.append(partner.image_id)
        out = copy_paste(out, weak_transform(partner, cfg.target_size), rng)
    if rng.random() < cfg.mixup_prob:
        partner = batch[int(rng.integers(0, n))]
        sources.append(partner.image_id)
        out = mixup(out, _strong_base(partner, cfg, rng), cfg.mixup_beta, rng)
    if rng.random() < cfg.cutout_prob:
        out = cutout(out, cfg, rng)
    return out.copy(image_id=anchor.image_id, captions=anchor.captions), sources


def make_views(batch: Sequence[Sample], cfg: AugConfig,
               rng: Optional[np.random.Generator] = None) -> AugmentedViews:
    """Apply the strong and the weak pipeline to the same images.

    Without ``rng`` a fresh generator seeded from ``cfg.seed`` is used.
    """
    if not batch:
        raise ValueError("make_views needs a nonempty batch")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    strong, sources = [], []
    for i in range(len(batch)):
        s, src = strong_transform(batch, i, cfg, rng)
        strong.append(s)
        sources.append(src)
    weak = [weak_transform(s, cfg.target_size) for s in batch]
    return AugmentedViews(strong=strong, weak=weak, provenance=[s.image_id for s in batch], sources=sources)
