import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtl_vision.core import (
    Box,
    Detection,
    EmptyMask,
    InstanceAnnotation,
    LabeledBox,
    Sample,
    ShapeError,
    box_iou,
    box_mask,
    clip_box,
    mask_to_bbox,
    nms,
)

coord = st.integers(-20, 40)


@st.composite
def boxes(draw, positive=False):
    x1, y1 = draw(coord), draw(coord)
    lo = 1 if positive else 0
    return Box(x1, y1, x1 + draw(st.integers(lo, 30)), y1 + draw(st.integers(lo, 30)))


def pixel_iou(a: Box, b: Box) -> float:
    """Integer-grid oracle: count unit cells."""
    off = 64
    ma = np.zeros((160, 160), bool)
    mb = np.zeros((160, 160), bool)
    ma[int(a.y1) + off:int(a.y2) + off, int(a.x1) + off:int(a.x2) + off] = True
    mb[int(b.y1) + off:int(b.y2) + off, int(b.x1) + off:int(b.x2) + off] = True
    union = (ma | mb).sum()
    return 0.0 if union == 0 else (ma & mb).sum() / union


def test_box_iou_examples():
    assert box_iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0
    assert box_iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0
    assert box_iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert box_iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pixel_iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3))


def test_degenerate_iou_is_zero():
    assert box_iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


def test_box_rejects_bad_coordinates():
    with pytest.raises(ValueError):
        Box(2, 0, 1, 1)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 1)


@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = box_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == box_iou(b, a)
    assert v == pytest.approx(pixel_iou(a, b), abs=1e-12)


@given(boxes(positive=True))
def test_self_iou_one(a):
    assert box_iou(a, a) == 1.0


def det(x1, y1, x2, y2, s, c=0):
    return Detection(Box(x1, y1, x2, y2), s, c)


def brute_nms(dets, thr):
    """Search every keep-subset for the one produced by the greedy rule."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for keep in itertools.product([0, 1], repeat=len(dets)):
        kept = [order[k] for k in range(len(order)) if keep[k]]
        ok = True
        for pos, i in enumerate(order):
            higher_kept = [j for j in order[:pos] if j in kept]
            suppressed = any(dets[j].category == dets[i].category and box_iou(dets[j].box, dets[i].box) > thr
                             for j in higher_kept)
            if (i in kept) == suppressed:
                ok = False
                break
        if ok:
            return [dets[i] for i in kept]
    raise AssertionError("no consistent outcome")


def test_nms_examples():
    a = det(0, 0, 10, 10, 0.9)
    assert nms([a], 0.5) == [a]
    b = det(0, 0, 10, 10, 0.8)
    assert nms([b, a], 0.5) == [a]
    c = det(20, 20, 30, 30, 0.8)
    assert nms([a, c], 0.5) == [a, c]


def test_nms_is_per_category():
    a, b = det(0, 0, 10, 10, 0.9, 0), det(0, 0, 10, 10, 0.8, 1)
    assert nms([a, b], 0.5) == [a, b]


def test_nms_rejects_threshold():
    with pytest.raises(ValueError):
        nms([], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(boxes(positive=True), st.floats(0, 1), st.integers(0, 2)), max_size=6),
       st.floats(0.05, 1.0))
def test_nms_matches_bruteforce_and_idempotent(items, thr):
    dets = [Detection(b, s, c) for b, s, c in items]
    out = nms(dets, thr)
    assert out == brute_nms(dets, thr)
    assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)
    assert nms(out, thr) == out


def test_mask_to_bbox_examples():
    m = np.zeros((10, 10), bool)
    m[3, 4] = True
    assert mask_to_bbox(m) == Box(4, 3, 5, 4)
    assert mask_to_bbox(np.ones((6, 9), bool)) == Box(0, 0, 9, 6)
    m = np.zeros((10, 10), bool)
    m[0, 0] = m[9, 9] = True
    assert mask_to_bbox(m) == Box(0, 0, 10, 10)
    with pytest.raises(EmptyMask):
        mask_to_bbox(np.zeros((3, 3), bool))


@given(st.integers(0, 15), st.integers(0, 15), st.integers(1, 16), st.integers(1, 16))
def test_mask_bbox_roundtrip(x, y, w, h):
    b = Box(x, y, x + w, y + h)
    assert mask_to_bbox(box_mask(b, 32, 32)) == b


def test_clip_examples():
    assert clip_box(Box(1, 1, 5, 5), 10, 10) == Box(1, 1, 5, 5)
    assert clip_box(Box(20, 20, 30, 30), 10, 10) is None
    assert clip_box(Box(-5, -5, 5, 5), 10, 10) == Box(0, 0, 5, 5)


@given(boxes(), st.integers(1, 40), st.integers(1, 40))
def test_clip_idempotent_and_inside(b, w, h):
    c = clip_box(b, w, h)
    if c is None:
        return
    assert clip_box(c, w, h) == c
    assert 0 <= c.x1 <= c.x2 <= w and 0 <= c.y1 <= c.y2 <= h


def test_detection_score_range():
    with pytest.raises(ValueError):
        det(0, 0, 1, 1, 1.5)


def test_labeled_box_category_range():
    with pytest.raises(ValueError):
        LabeledBox(Box(0, 0, 1, 1), 80)


def test_sample_contracts():
    img = np.zeros((4, 5, 3), np.uint8)
    with pytest.raises(ShapeError):
        Sample(img, [], np.zeros((4, 4), np.int64))
    with pytest.raises(ValueError):
        Sample(img, [], np.zeros((4, 5), np.int64), captions=["x"] * 6)


def test_with_mask_recomputes_box():
    m = np.zeros((8, 8), bool)
    m[2:4, 1:6] = True
    inst = InstanceAnnotation(LabeledBox(Box(0, 0, 8, 8), 3), np.ones((8, 8), bool)).with_mask(m)
    assert inst.box == Box(1, 2, 6, 4) and inst.category == 3
