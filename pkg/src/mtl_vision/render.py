"""Overlay rendering plus the machine-readable sidecar that accompanies it."""
from __future__ import annotations

import colorsys
import json
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np

from .core import UNLABELED_ID, Detection

SEMANTIC_ALPHA = 0.4
MASK_ALPHA = 0.5
PALETTE_SIZE = 64


def _make_palette(n: int) -> np.ndarray:
    # golden-ratio hue walk; fixed, so colours never depend on the input
    cols = []
    for i in range(n):
        h = (i * 0.618033988749895) % 1.0
        s = 0.65 + 0.35 * ((i // 7) % 2)
        v = 0.95 - 0.25 * ((i // 3) % 2)
        cols.append([round(255 * c) for c in colorsys.hsv_to_rgb(h, s, v)])
    return np.array(cols, dtype=np.uint8)


PALETTE = _make_palette(PALETTE_SIZE)


def color_for(category: int) -> np.ndarray:
    return PALETTE[int(category) % PALETTE_SIZE]


def render_overlay(image: np.ndarray, detections: Sequence[Detection] = (),
                   masks: Optional[np.ndarray] = None, semantic: Optional[np.ndarray] = None,
                   caption: Optional[str] = None, category_names: Optional[dict] = None) -> np.ndarray:
    """Draw semantic colours, instance masks, boxes with ``name:score`` labels and the caption.

    Everything is in the coordinates of ``image`` (RGB uint8); the output has its shape.
    """
    out = image.astype(np.float32).copy()
    if semantic is not None:
        labelled = semantic != UNLABELED_ID
        colours = PALETTE[np.asarray(semantic) % PALETTE_SIZE].astype(np.float32)
        out[labelled] = (1 - SEMANTIC_ALPHA) * out[labelled] + SEMANTIC_ALPHA * colours[labelled]
    if masks is not None:
        for d, m in zip(detections, masks):
            m = m.astype(bool)
            out[m] = (1 - MASK_ALPHA) * out[m] + MASK_ALPHA * color_for(d.category).astype(np.float32)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    for d in detections:
        col = tuple(int(c) for c in color_for(d.category))
        b = d.box
        p1 = (int(round(b.x1)), int(round(b.y1)))
        p2 = (max(int(round(b.x2)) - 1, p1[0]), max(int(round(b.y2)) - 1, p1[1]))
        cv2.rectangle(out, p1, p2, col, 1)
        name = (category_names or {}).get(d.category, str(d.category))
        cv2.putText(out, f"{name}:{d.score:.2f}", (p1[0], max(p1[1] - 2, 8)),
                    cv2.FONT_HERSHEY_SIMPLEX, 0.3, col, 1, cv2.LINE_8)
    if caption:
        cv2.putText(out, caption, (2, out.shape[0] - 3), cv2.FONT_HERSHEY_SIMPLEX, 0.35,
                    (255, 255, 255), 1, cv2.LINE_8)
    return out


def sidecar(detections: Sequence[Detection], image_size, caption: Optional[str] = None,
            semantic: Optional[np.ndarray] = None, **extra) -> dict:
    h, w = image_size
    dets: List[dict] = [{"box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2], "score": d.score,
                         "category": d.category} for d in detections]
    doc = {"width": int(w), "height": int(h), "detections": dets, "caption": caption}
    if semantic is not None:
        ids, counts = np.unique(semantic, return_counts=True)
        doc["semantic_pixels"] = {str(int(i)): int(c) for i, c in zip(ids, counts)}
    doc.update(extra)
    return doc


def write_overlay(path, overlay: np.ndarray, doc: dict) -> Path:
    """Write the PNG at ``path`` and its JSON sidecar next to it; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")
    side = path.with_suffix(".json")
    side.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return side
