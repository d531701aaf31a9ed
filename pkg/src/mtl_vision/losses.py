"""Target assignment, per-task losses and their weighted sum."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .cocodata import PAD
from .core import ShapeError
from .network import STRIDES, decode_boxes, mask_logits

SCALE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))
CENTER_RADIUS = 1.5
PRIOR_SIDE = 4  # prior box side in cells, used only for tie-breaking

TASKS = ("det", "mask", "sem", "cap")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, task: str, value, context: str = ""):
        self.task = task
        msg = f"non-finite {task} loss ({value})"
        super().__init__(msg + (f" [{context}]" if context else ""))


@dataclass
class LossWeights:
    w_det: float = 1.0
    w_mask: float = 1.0
    w_sem: float = 1.0
    w_cap: float = 1.0

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")

    def as_dict(self) -> Dict[str, float]:
        return {"det": self.w_det, "mask": self.w_mask, "sem": self.w_sem, "cap": self.w_cap}


@dataclass
class AssignmentResult:
    """``levels[i]`` is an (H, W) int array of GT indices, -1 for background."""

    levels: List[np.ndarray]
    strides: Tuple[int, ...] = STRIDES

    def assigned(self):
        """Yield (level, row, col, gt_index) in deterministic order."""
        for li, grid in enumerate(self.levels):
            rows, cols = np.nonzero(grid >= 0)
            for r, c in zip(rows.tolist(), cols.tolist()):
                yield li, r, c, int(grid[r, c])

    @property
    def num_assigned(self) -> int:
        return int(sum((g >= 0).sum() for g in self.levels))


def _level_for(box: np.ndarray, scale_ranges) -> int:
    side = max(box[2] - box[0], box[3] - box[1])
    for li, (lo, hi) in enumerate(scale_ranges):
        if lo <= side < hi:
            return li
    return len(scale_ranges) - 1


def _iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def assign_detection_targets(gt_boxes, image_size, strides: Sequence[int] = STRIDES,
                             scale_ranges=SCALE_RANGES) -> AssignmentResult:
    """Centre-prior assignment.

    Each GT goes to the level whose scale range holds its longer side. There
    it claims the cell containing its centre plus those 8-neighbours (within
    1.5 cells) whose anchor point lies inside the box. A cell claimed twice
    keeps the GT with the larger IoU against the cell's square prior, then the
    lower GT index.
    """
    h, w = image_size
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    levels = [np.full((h // s, w // s), -1, dtype=np.int64) for s in strides]
    best_iou = [np.full((h // s, w // s), -1.0) for s in strides]
    for j, box in enumerate(boxes):
        li = _level_for(box, scale_ranges)
        s = strides[li]
        gh, gw = levels[li].shape
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        ci = min(max(int(cx // s), 0), gw - 1)
        cj = min(max(int(cy // s), 0), gh - 1)
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                gi, gj = ci + di, cj + dj
                if not (0 <= gi < gw and 0 <= gj < gh):
                    continue
                ax, ay = (gi + 0.5) * s, (gj + 0.5) * s
                if max(abs(ax - cx), abs(ay - cy)) > CENTER_RADIUS * s:
                    continue
                if (di or dj) and not (box[0] < ax < box[2] and box[1] < ay < box[3]):
                    continue
                half = PRIOR_SIDE * s / 2
                iou = _iou((ax - half, ay - half, ax + half, ay + half), box)
                if iou > best_iou[li][gj, gi]:
                    best_iou[li][gj, gi] = iou
                    levels[li][gj, gi] = j
    return AssignmentResult(levels, tuple(strides))


def ciou(pred: Tensor, target: Tensor, eps: float = 1e-9) -> Tensor:
    """Complete IoU between matching rows of two (N, 4) corner-form tensors."""
    pw, ph = pred[:, 2] - pred[:, 0], pred[:, 3] - pred[:, 1]
    tw, th = target[:, 2] - target[:, 0], target[:, 3] - target[:, 1]
    iw = (torch.min(pred[:, 2], target[:, 2]) - torch.max(pred[:, 0], target[:, 0])).clamp(min=0)
    ih = (torch.min(pred[:, 3], target[:, 3]) - torch.max(pred[:, 1], target[:, 1])).clamp(min=0)
    inter = iw * ih
    union = pw * ph + tw * th - inter + eps
    iou = inter / union
    cw = torch.max(pred[:, 2], target[:, 2]) - torch.min(pred[:, 0], target[:, 0])
    ch = torch.max(pred[:, 3], target[:, 3]) - torch.min(pred[:, 1], target[:, 1])
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = ((pred[:, 0] + pred[:, 2] - target[:, 0] - target[:, 2]) ** 2 +
            (pred[:, 1] + pred[:, 3] - target[:, 1] - target[:, 3]) ** 2) / 4
    v = (4 / math.pi ** 2) * (torch.atan(tw / (th + eps)) - torch.atan(pw / (ph + eps))) ** 2
    alpha = v / (1 - iou + v + eps)
    return iou - rho2 / c2 - alpha * v


def _gather(det_maps: Sequence[Tensor], assignments: Sequence[AssignmentResult]):
    """Collect per-assignment (batch, level, row, col, gt) index lists."""
    idx = []
    for b, a in enumerate(assignments):
        for li, r, c, j in a.assigned():
            idx.append((b, li, r, c, j))
    return idx


def detection_loss(det_maps: Sequence[Tensor], assignments: Sequence[AssignmentResult],
                   gt_boxes: Sequence, gt_labels: Sequence, num_classes: int) -> Dict[str, Tensor]:
    """Box (1 - CIoU), objectness BCE over every location, class BCE on assigned locations."""
    ref = det_maps[0]
    obj_logits, obj_targets = [], []
    for li, m in enumerate(det_maps):
        obj_logits.append(m[..., 4].reshape(-1))
        t = torch.zeros(m.shape[:3], dtype=m.dtype, device=m.device)
        for b, a in enumerate(assignments):
            t[b] = torch.as_tensor(a.levels[li] >= 0, dtype=m.dtype)
        obj_targets.append(t.reshape(-1))
    obj = F.binary_cross_entropy_with_logits(torch.cat(obj_logits), torch.cat(obj_targets))

    idx = _gather(det_maps, assignments)
    if not idx:
        zero = ref.sum() * 0.0
        return {"box": zero, "obj": obj, "cls": zero, "total": obj}
    pred_boxes, tgt_boxes, cls_logits, cls_tgt = [], [], [], []
    decoded = [decode_boxes(m[..., :4], s) for m, s in zip(det_maps, STRIDES)]
    for b, li, r, c, j in idx:
        pred_boxes.append(decoded[li][b, r, c])
        tgt_boxes.append(torch.as_tensor(np.asarray(gt_boxes[b][j], dtype=np.float64), dtype=ref.dtype))
        cls_logits.append(det_maps[li][b, r, c, 5:5 + num_classes])
        onehot = torch.zeros(num_classes, dtype=ref.dtype)
        onehot[int(gt_labels[b][j])] = 1.0
        cls_tgt.append(onehot)
    box = (1.0 - ciou(torch.stack(pred_boxes), torch.stack(tgt_boxes))).mean()
    cls = F.binary_cross_entropy_with_logits(torch.stack(cls_logits), torch.stack(cls_tgt))
    return {"box": box, "obj": obj, "cls": cls, "total": box + obj + cls}


def downsample_mask(mask, size: Tuple[int, int]) -> Tensor:
    """Binary mask at prototype resolution: area-average then > 0.5."""
    m = torch.as_tensor(np.asarray(mask), dtype=torch.float64)[None, None]
    if tuple(m.shape[-2:]) == tuple(size):
        return m[0, 0] > 0.5
    return F.interpolate(m, size=size, mode="area")[0, 0] > 0.5


def box_crop(box, size: Tuple[int, int], scale: float, dtype=torch.float64) -> Tensor:
    """(H, W) indicator of prototype pixels whose centres fall inside ``box`` (image coords)."""
    h, w = size
    ys = (torch.arange(h, dtype=dtype) + 0.5) * scale
    xs = (torch.arange(w, dtype=dtype) + 0.5) * scale
    x1, y1, x2, y2 = (float(v) for v in box)
    return (((xs >= x1) & (xs < x2))[None, :] & ((ys >= y1) & (ys < y2))[:, None]).to(dtype)


def instance_mask_loss(prototypes: Tensor, det_maps: Sequence[Tensor],
                       assignments: Sequence[AssignmentResult], gt_boxes: Sequence,
                       gt_masks: Sequence, num_classes: int) -> Tensor:
    """Mean over assignments of crop-restricted BCE, normalized by GT box area (prototype pixels)."""
    idx = _gather(det_maps, assignments)
    if not idx:
        return prototypes.sum() * 0.0
    hp, wp = prototypes.shape[-2:]
    img_h = det_maps[0].shape[1] * STRIDES[0]
    scale = img_h / hp
    cache: Dict[Tuple[int, int], Tuple[Tensor, Tensor, float]] = {}
    losses = []
    for b, li, r, c, j in idx:
        if (b, j) not in cache:
            box = np.asarray(gt_boxes[b][j], dtype=np.float64)
            target = downsample_mask(gt_masks[b][j], (hp, wp)).to(prototypes.dtype)
            crop = box_crop(box, (hp, wp), scale, prototypes.dtype)
            area = max((box[2] - box[0]) * (box[3] - box[1]) / scale ** 2, 1.0)
            cache[(b, j)] = (target, crop, area)
        target, crop, area = cache[(b, j)]
        coef = torch.tanh(det_maps[li][b, r, c, 5 + num_classes:])
        logits = mask_logits(prototypes[b], coef[None])[0]
        bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
        losses.append((bce * crop).sum() / area)
    return torch.stack(losses).mean()


def semantic_loss(logits: Tensor, semantic) -> Tensor:
    """Per-pixel cross-entropy at logit resolution; GT sampled nearest at cell centres."""
    sem = torch.as_tensor(semantic, dtype=torch.long)
    if sem.dim() == 2:
        sem = sem[None]
    b, _, h, w = logits.shape
    if sem.shape[0] != b:
        raise ShapeError(f"batch mismatch: logits {b}, targets {sem.shape[0]}")
    H, W = sem.shape[-2:]
    if H % h or W % w or H // h != W // w:
        raise ShapeError(f"target {H}x{W} is not an integer multiple of logits {h}x{w}")
    s = H // h
    target = sem[:, s // 2::s, s // 2::s]
    return F.cross_entropy(logits, target)


def caption_loss(logits: Tensor, targets) -> Tensor:
    """Token cross-entropy with padding excluded from numerator and denominator."""
    tgt = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:2] != tgt.shape:
        raise ShapeError(f"logits {tuple(logits.shape[:2])} vs targets {tuple(tgt.shape)}")
    if not (tgt != PAD).any():
        warnings.warn("caption targets are all padding; caption loss is 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=PAD)


def total_loss(components: Dict[str, Tensor], weights: LossWeights, context: str = "") -> Tensor:
    """Weighted sum of the task losses present in ``components``."""
    w = weights.as_dict()
    total = None
    for task in TASKS:
        if task not in components:
            continue
        value = components[task]
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLoss(task, float(value), context)
        term = w[task] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components given")
    return total
