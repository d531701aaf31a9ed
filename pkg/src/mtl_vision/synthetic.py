"""Procedurally generated scenes with boxes, masks, stuff and matching captions.

Used by the test-suite and the demo commands; ``write_coco`` emits the same
scenes as COCO-format instance/stuff/caption files.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np

from .cocodata import paint_instances, rasterize_polygon, rle_counts_to_string, rle_encode
from .core import NUM_INSTANCE_CLASSES, UNLABELED_ID, InstanceAnnotation, LabeledBox, Sample, mask_to_bbox

# (name, colour); category index = position
SHAPES = [("square", "red", (220, 40, 40)), ("circle", "blue", (40, 60, 220)),
          ("triangle", "yellow", (230, 210, 40)), ("square", "white", (235, 235, 235)),
          ("circle", "purple", (150, 40, 170)), ("triangle", "cyan", (40, 200, 210))]
# merged semantic ids for stuff start at 80
STUFF = [("grass", (60, 150, 60)), ("sky", (120, 180, 235)), ("sand", (200, 180, 120)),
         ("water", (30, 90, 140)), ("wall", (130, 120, 110))]


def _shape_mask(kind: str, x: int, y: int, size: int, h: int, w: int):
    """Return (mask, polygon or None)."""
    if kind == "square":
        poly = [x, y, x + size, y, x + size, y + size, x, y + size]
        return rasterize_polygon(poly, h, w), poly
    if kind == "triangle":
        poly = [x + size / 2, y, x + size, y + size, x, y + size]
        return rasterize_polygon(poly, h, w), poly
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = size / 2
    return ((xx - x - r) ** 2 + (yy - y - r) ** 2) <= r * r, None


def make_scene(rng: np.random.Generator, size: int = 64, max_objects: int = 2, image_id: int = 0,
               captions_per_image: int = 1, num_shapes: Optional[int] = None):
    """One synthetic scene; returns (sample, polygons) where polygons[i] is None for RLE shapes."""
    h = w = size
    shapes = SHAPES[: num_shapes or len(SHAPES)]
    top, bottom = rng.choice(len(STUFF), size=2, replace=False)
    horizon = int(rng.integers(size // 3, 2 * size // 3))
    image = np.zeros((h, w, 3), dtype=np.uint8)
    image[:horizon] = STUFF[top][1]
    image[horizon:] = STUFF[bottom][1]
    semantic = np.full((h, w), UNLABELED_ID, dtype=np.int64)
    semantic[:horizon] = NUM_INSTANCE_CLASSES + top
    semantic[horizon:] = NUM_INSTANCE_CLASSES + bottom

    n = int(rng.integers(1, max_objects + 1))
    instances, polys, cats = [], [], []
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(n):
        for _attempt in range(20):
            cat = int(rng.integers(len(shapes)))
            s = int(rng.integers(size // 5, size // 2))
            x, y = int(rng.integers(0, w - s)), int(rng.integers(0, h - s))
            mask, poly = _shape_mask(shapes[cat][0], x, y, s, h, w)
            if mask.any() and not (mask & occupied).any():
                break
        else:
            continue
        occupied |= mask
        image[mask] = shapes[cat][2]
        instances.append(InstanceAnnotation(LabeledBox(mask_to_bbox(mask), cat), mask))
        polys.append(poly)
        cats.append(cat)
    semantic = paint_instances(semantic, instances)
    # light texture so pixels are not piecewise constant
    noise = rng.integers(-6, 7, size=image.shape)
    image = np.clip(image.astype(np.int64) + noise, 0, 255).astype(np.uint8)

    order = np.argsort([a.box.x1 for a in instances], kind="stable")
    things = " and ".join(f"a {shapes[cats[i]][1]} {shapes[cats[i]][0]}" for i in order)
    base = f"{things} on the {STUFF[bottom][0]} below the {STUFF[top][0]}"
    variants = [base, f"{things} on the {STUFF[bottom][0]}", f"{things} under the {STUFF[top][0]}",
                f"the {STUFF[bottom][0]} with {things}", f"{things} in front of the {STUFF[top][0]}"]
    captions = variants[:captions_per_image]
    return Sample(image, instances, semantic, captions, image_id), polys


def make_dataset(n: int, seed: int = 0, size: int = 64, max_objects: int = 2,
                 captions_per_image: int = 1, num_shapes: Optional[int] = None) -> List[Sample]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, size, max_objects, i + 1, captions_per_image, num_shapes)[0] for i in range(n)]


def write_coco(root, n: int, seed: int = 0, size: int = 64, max_objects: int = 2,
               captions_per_image: int = 1, num_shapes: Optional[int] = None) -> dict:
    """Write images plus instances/stuff/captions JSON under ``root``; returns the file paths."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shapes = SHAPES[: num_shapes or len(SHAPES)]
    images, inst_anns, stuff_anns, cap_anns = [], [], [], []
    for i in range(n):
        iid = i + 1
        sample, polys = make_scene(rng, size, max_objects, iid, captions_per_image, num_shapes)
        name = f"{iid:06d}.png"
        cv2.imwrite(str(root / "images" / name), cv2.cvtColor(sample.image, cv2.COLOR_RGB2BGR))
        images.append({"id": iid, "file_name": name, "width": size, "height": size})
        for inst, poly in zip(sample.instances, polys):
            if poly is not None:
                seg = [list(map(float, poly))]
            else:
                rle = rle_encode(inst.mask)
                seg = {"size": rle["size"], "counts": rle_counts_to_string(rle["counts"])}
            b = inst.box
            inst_anns.append({"id": len(inst_anns) + 1, "image_id": iid, "category_id": inst.category + 1,
                              "bbox": [b.x1, b.y1, b.width, b.height], "area": float(inst.mask.sum()),
                              "iscrowd": 0, "segmentation": seg})
        for v in np.unique(sample.semantic):
            v = int(v)
            if v < NUM_INSTANCE_CLASSES or v == UNLABELED_ID:
                continue
            rle = rle_encode(sample.semantic == v)
            stuff_anns.append({"id": len(stuff_anns) + 1, "image_id": iid, "category_id": 92 + v - NUM_INSTANCE_CLASSES,
                               "segmentation": {"size": rle["size"], "counts": rle_counts_to_string(rle["counts"])},
                               "iscrowd": 0})
        for c in sample.captions:
            cap_anns.append({"id": len(cap_anns) + 1, "image_id": iid, "caption": c.capitalize() + "."})
    inst_cats = [{"id": k + 1, "name": f"{shape[1]} {shape[0]}", "supercategory": "shape"}
                 for k, shape in enumerate(shapes)]
    stuff_cats = [{"id": 92 + k, "name": name, "supercategory": "stuff"} for k, (name, _) in enumerate(STUFF)]
    paths = {"instances": root / "instances.json", "stuff": root / "stuff.json",
             "captions": root / "captions.json", "image_root": root / "images"}
    paths["instances"].write_text(json.dumps({"images": images, "annotations": inst_anns, "categories": inst_cats}))
    paths["stuff"].write_text(json.dumps({"images": images, "annotations": stuff_anns, "categories": stuff_cats}))
    paths["captions"].write_text(json.dumps({"images": images, "annotations": cap_anns}))
    return {k: str(v) for k, v in paths.items()}
