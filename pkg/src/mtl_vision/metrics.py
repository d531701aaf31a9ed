"""Box/mask AP (COCO 101-point), MIoU/FWIoU and corpus BLEU-4."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import NUM_SEMANTIC_CLASSES, ShapeError, box_iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class ImagePredictions:
    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    masks: Optional[np.ndarray] = None  # (N, H, W) bool


@dataclass
class ImageTargets:
    boxes: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(a.shape[0], -1).astype(np.float64)
    b = b.reshape(b.shape[0], -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _evaluate_image(ious: np.ndarray, n_gt: int):
    """Greedy COCO matching; returns (T, D) bool matched flags for score-sorted detections."""
    n_det = ious.shape[0]
    matched = np.zeros((len(IOU_THRESHOLDS), n_det), dtype=bool)
    for ti, t in enumerate(IOU_THRESHOLDS):
        gt_taken = np.zeros(n_gt, dtype=bool)
        for d in range(n_det):
            best, m = min(t, 1 - 1e-10), -1
            for g in range(n_gt):
                if gt_taken[g] or ious[d, g] < best:
                    continue
                best, m = ious[d, g], g
            if m >= 0:
                gt_taken[m] = True
                matched[ti, d] = True
    return matched


class APAccumulator:
    """Collects per-(image, category) matches; ``merge`` combines workers."""

    def __init__(self, mode: str = "box"):
        if mode not in ("box", "mask"):
            raise ValueError(f"unknown AP mode {mode!r}")
        self.mode = mode
        self.scores: Dict[int, List[np.ndarray]] = {}
        self.matches: Dict[int, List[np.ndarray]] = {}
        self.n_gt: Counter = Counter()

    def add(self, pred: ImagePredictions, gt: ImageTargets) -> None:
        p_labels = np.asarray(pred.labels, dtype=np.int64).reshape(-1)
        g_labels = np.asarray(gt.labels, dtype=np.int64).reshape(-1)
        for c in sorted(set(p_labels.tolist()) | set(g_labels.tolist())):
            pi = np.flatnonzero(p_labels == c)
            gi = np.flatnonzero(g_labels == c)
            self.n_gt[c] += len(gi)
            if len(pi) == 0:
                self.scores.setdefault(c, [])
                self.matches.setdefault(c, [])
                continue
            scores = np.asarray(pred.scores, dtype=np.float64)[pi]
            order = np.argsort(-scores, kind="mergesort")[:MAX_DETS]
            pi = pi[order]
            if len(gi) == 0:
                ious = np.zeros((len(pi), 0))
            elif self.mode == "box":
                ious = box_iou_matrix(np.asarray(pred.boxes)[pi], np.asarray(gt.boxes)[gi])
            else:
                ious = mask_iou_matrix(np.asarray(pred.masks)[pi], np.asarray(gt.masks)[gi])
            self.scores.setdefault(c, []).append(scores[order])
            self.matches.setdefault(c, []).append(_evaluate_image(ious, len(gi)))

    def merge(self, other: "APAccumulator") -> "APAccumulator":
        for c, v in other.scores.items():
            self.scores.setdefault(c, []).extend(v)
        for c, v in other.matches.items():
            self.matches.setdefault(c, []).extend(v)
        self.n_gt.update(other.n_gt)
        return self

    def per_category(self) -> Dict[int, float]:
        """AP@[.50:.95] for every category with at least one GT instance."""
        out = {}
        for c, n_gt in sorted(self.n_gt.items()):
            if n_gt == 0:
                continue
            if not self.scores.get(c):
                out[c] = 0.0
                continue
            scores = np.concatenate(self.scores[c])
            matches = np.concatenate(self.matches[c], axis=1)
            order = np.argsort(-scores, kind="mergesort")
            matches = matches[:, order]
            precisions = []
            for tps in matches:
                tp = np.cumsum(tps).astype(np.float64)
                fp = np.cumsum(~tps).astype(np.float64)
                rc = tp / n_gt
                pr = tp / np.maximum(tp + fp, np.spacing(1))
                for i in range(len(pr) - 1, 0, -1):
                    if pr[i] > pr[i - 1]:
                        pr[i - 1] = pr[i]
                inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
                q = np.zeros(len(RECALL_THRESHOLDS))
                valid = inds < len(pr)
                q[valid] = pr[inds[valid]]
                precisions.append(q.mean())
            out[c] = float(np.mean(precisions))
        return out

    def result(self):
        """(AP, flag) where flag is set when there was nothing to evaluate."""
        per_cat = self.per_category()
        if not per_cat:
            return 0.0, "empty"
        return float(np.mean(list(per_cat.values()))), None


def coco_ap(predictions: Sequence[ImagePredictions], ground_truth: Sequence[ImageTargets],
            mode: str = "box") -> float:
    acc = APAccumulator(mode)
    for p, g in zip(predictions, ground_truth):
        acc.add(p, g)
    return acc.result()[0]


class ConfusionAccumulator:
    def __init__(self, num_classes: int = NUM_SEMANTIC_CLASSES):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        n = self.num_classes
        self.matrix += np.bincount(gt.ravel().astype(np.int64) * n + pred.ravel().astype(np.int64),
                                   minlength=n * n).reshape(n, n)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        self.matrix += other.matrix
        return self

    def per_category(self, subset: Optional[Sequence[int]] = None) -> Dict[int, float]:
        cats = list(range(self.num_classes)) if subset is None else sorted(set(int(c) for c in subset))
        sub = np.asarray(cats)
        # only pixels whose ground truth lies in the subset are scored
        rows = self.matrix[sub]
        out = {}
        for k, c in enumerate(cats):
            gt_c = rows[k].sum()
            if gt_c == 0:
                continue
            inter = rows[k, c]
            pred_c = rows[:, c].sum()
            out[c] = inter / (gt_c + pred_c - inter)
        return out

    def result(self, subset: Optional[Sequence[int]] = None):
        ious = self.per_category(subset)
        if not ious:
            return 0.0, 0.0
        cats = list(ious)
        gt_counts = self.matrix[cats].sum(1).astype(np.float64)
        freq = gt_counts / gt_counts.sum()
        vals = np.array([ious[c] for c in cats])
        return float(vals.mean()), float((freq * vals).sum())


def segmentation_iou(pred: np.ndarray, gt: np.ndarray, category_subset: Optional[Sequence[int]] = None,
                     num_classes: int = NUM_SEMANTIC_CLASSES):
    """Return ``(miou, fwiou)`` over categories present in the ground truth."""
    acc = ConfusionAccumulator(num_classes)
    acc.add(pred, gt)
    return acc.result(category_subset)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


class BleuAccumulator:
    def __init__(self, max_n: int = 4):
        self.max_n = max_n
        self.matches = np.zeros(max_n, dtype=np.int64)
        self.totals = np.zeros(max_n, dtype=np.int64)
        self.cand_len = 0
        self.ref_len = 0
        self.count = 0

    def add(self, candidate: str, references: Sequence[str]) -> None:
        if not references:
            raise ValueError("each candidate needs at least one reference")
        cand = candidate.split()
        refs = [r.split() for r in references]
        for n in range(1, self.max_n + 1):
            c_counts = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                for g, k in _ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], k)
            self.matches[n - 1] += sum(min(k, max_ref[g]) for g, k in c_counts.items())
            self.totals[n - 1] += max(len(cand) - n + 1, 0)
        self.cand_len += len(cand)
        # closest reference length, shorter wins ties
        self.ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        self.count += 1

    def merge(self, other: "BleuAccumulator") -> "BleuAccumulator":
        self.matches += other.matches
        self.totals += other.totals
        self.cand_len += other.cand_len
        self.ref_len += other.ref_len
        self.count += other.count
        return self

    def result(self) -> float:
        if self.count == 0:
            raise ValueError("BLEU of an empty candidate set is undefined")
        if self.cand_len == 0 or (self.matches == 0).any():
            return 0.0
        log_p = np.log(self.matches / self.totals).mean()
        bp = math.exp(min(0.0, 1.0 - self.ref_len / self.cand_len))
        return float(bp * math.exp(log_p))


def bleu4(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    if len(candidates) == 0:
        raise ValueError("BLEU of an empty candidate set is undefined")
    if len(candidates) != len(references):
        raise ValueError("candidates and reference sets differ in length")
    acc = BleuAccumulator()
    for c, refs in zip(candidates, references):
        acc.add(c, refs)
    return acc.result()


@dataclass
class MetricReport:
    box_ap: float
    mask_ap: float
    miou: float
    fwiou: float
    bleu4: float
    per_category: Dict[str, Dict[str, float]] = field(default_factory=dict)
    num_images: int = 0
    flags: List[str] = field(default_factory=list)

    FIELDS = ("box_ap", "mask_ap", "miou", "fwiou", "bleu4")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(**d)

    def table(self) -> str:
        rows = [("box AP", self.box_ap), ("mask AP", self.mask_ap), ("MIoU", self.miou),
                ("FWIoU", self.fwiou), ("BLEU-4", self.bleu4)]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'metric'.ljust(width)}  value", "-" * (width + 9)]
        lines += [f"{name.ljust(width)}  {value:.4f}" for name, value in rows]
        return "\n".join(lines)
