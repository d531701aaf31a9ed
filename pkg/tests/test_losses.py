import math

import numpy as np
import pytest
import torch

from mtl_vision.losses import (
    LossWeights,
    NonFiniteLoss,
    assign_detection_targets,
    caption_loss,
    ciou,
    detection_loss,
    instance_mask_loss,
    semantic_loss,
    total_loss,
)
from mtl_vision.core import ShapeError

from helpers import GRAD_TASKS, finite_difference_errors, micro_problem


def test_assignment_single_gt():
    # 20x20 box centred at (28, 28): level 0 (stride 8), centre cell (3, 3)
    a = assign_detection_targets([[18, 18, 38, 38]], (64, 64))
    cells = {(li, r, c) for li, r, c, _ in a.assigned()}
    expected = {(0, r, c) for r in (2, 3, 4) for c in (2, 3, 4)}
    # neighbours count only when their anchor point lies inside the box
    oracle = {(0, r, c) for (_, r, c) in expected if 18 < (c + 0.5) * 8 < 38 and 18 < (r + 0.5) * 8 < 38}
    assert cells == oracle | {(0, 3, 3)}
    assert all(g.max() <= 0 for g in a.levels)


def test_assignment_levels_by_scale():
    a = assign_detection_targets([[0, 0, 100, 100], [0, 0, 200, 150]], (256, 256))
    levels = {li: j for li, _, _, j in a.assigned()}
    assert levels == {1: 0, 2: 1}


def test_assignment_empty():
    a = assign_detection_targets(np.zeros((0, 4)), (64, 64))
    assert a.num_assigned == 0 and all((g == -1).all() for g in a.levels)


def test_assignment_tie_break_by_index():
    a = assign_detection_targets([[10, 10, 30, 30], [10, 10, 30, 30]], (64, 64))
    assert {j for *_, j in a.assigned()} == {0}
    # shared cells go to the GT whose IoU with the 32 px square prior is larger
    boxes = [[4, 4, 36, 36], [12, 12, 28, 28]]
    b = assign_detection_targets(boxes, (64, 64))

    def prior_iou(r, c, box):
        ax, ay = (c + 0.5) * 8, (r + 0.5) * 8
        p = (ax - 16, ay - 16, ax + 16, ay + 16)
        iw = max(0, min(p[2], box[2]) - max(p[0], box[0]))
        ih = max(0, min(p[3], box[3]) - max(p[1], box[1]))
        return iw * ih / (32 * 32 + (box[2] - box[0]) * (box[3] - box[1]) - iw * ih)

    assert b.levels[0][2, 2] == int(prior_iou(2, 2, boxes[1]) > prior_iou(2, 2, boxes[0])) == 0


def test_ciou_self_is_one():
    b = torch.tensor([[1.0, 2.0, 7.0, 9.0], [0.0, 0.0, 3.0, 1.0]], dtype=torch.float64)
    assert torch.allclose(ciou(b, b), torch.ones(2, dtype=torch.float64))


def _maps_for(boxes, size=64, nc=3, k=2, seed=0):
    torch.manual_seed(seed)
    return [torch.randn(1, size // s, size // s, 5 + nc + k, dtype=torch.float64) for s in (8, 16, 32)]


def test_detection_loss_components():
    maps = _maps_for(None)
    gt = [np.array([[18.0, 18.0, 38.0, 38.0]])]
    labels = [np.array([1])]
    a = [assign_detection_targets(gt[0], (64, 64))]
    out = detection_loss(maps, a, gt, labels, 3)
    assert set(out) == {"box", "obj", "cls", "total"}
    assert torch.isclose(out["total"], out["box"] + out["obj"] + out["cls"])
    assert all(torch.isfinite(v) for v in out.values())


def test_detection_loss_perfect_box():
    # raw = softplus^-1(d / stride) so the decoded box equals the GT box
    gt = np.array([[20.0, 20.0, 36.0, 36.0]])
    a = assign_detection_targets(gt, (64, 64))
    maps = _maps_for(None)
    for _, r, c, _ in a.assigned():
        ax, ay = (c + 0.5) * 8, (r + 0.5) * 8
        d = torch.tensor([ax - 20, ay - 20, 36 - ax, 36 - ay], dtype=torch.float64) / 8
        maps[0][0, r, c, :4] = torch.log(torch.expm1(d))
    out = detection_loss(maps, [a], [gt], [np.array([0])], 3)
    assert float(out["box"]) == pytest.approx(0.0, abs=1e-9)


def test_detection_loss_no_gt():
    maps = [m.clone().requires_grad_(True) for m in _maps_for(None)]
    a = [assign_detection_targets(np.zeros((0, 4)), (64, 64))]
    out = detection_loss(maps, a, [np.zeros((0, 4))], [np.zeros(0, int)], 3)
    assert float(out["box"].detach()) == 0 and float(out["cls"].detach()) == 0
    out["total"].backward()
    # gradient of BCE toward 0 on every objectness logit is sigmoid(x) > 0
    assert all((m.grad[..., 4] > 0).all() for m in maps)


def test_mask_loss_saturated_is_zero_and_crop_invariant():
    gt_mask = np.zeros((64, 64), bool)
    gt_mask[16:32, 16:32] = True
    box = np.array([[12.0, 12.0, 36.0, 36.0]])
    a = [assign_detection_targets(box, (64, 64))]
    target16 = torch.zeros(16, 16, dtype=torch.float64)
    target16[4:8, 4:8] = 1
    protos = (target16 * 2 - 1)[None, None] * 60  # K = 1
    maps = _maps_for(None, k=1)
    for m in maps:
        m[..., -1] = 20.0  # tanh -> 1
    loss = instance_mask_loss(protos, maps, a, [box], [gt_mask[None]], 3)
    assert float(loss) < 1e-12
    # changing prototype values outside the GT crop leaves the loss unchanged
    noisy = protos.clone()
    noisy[0, 0, 12:, 12:] = torch.randn(4, 4, dtype=torch.float64)
    assert float(instance_mask_loss(noisy, maps, a, [box], [gt_mask[None]], 3)) == float(loss)
    none = [assign_detection_targets(np.zeros((0, 4)), (64, 64))]
    assert float(instance_mask_loss(protos, maps, none, [np.zeros((0, 4))], [np.zeros((0, 64, 64))], 3)) == 0


def test_semantic_loss_examples():
    uniform = torch.zeros(2, 172, 4, 4, dtype=torch.float64)
    sem = torch.randint(0, 172, (2, 16, 16))
    assert float(semantic_loss(uniform, sem)) == pytest.approx(math.log(172), abs=1e-6)
    target = sem[:, 2::4, 2::4]
    perfect = torch.nn.functional.one_hot(target, 172).permute(0, 3, 1, 2).double() * 1e4
    assert float(semantic_loss(perfect, sem)) == pytest.approx(0.0, abs=1e-9)
    logits = torch.randn(1, 172, 4, 4, dtype=torch.float64)
    gt = torch.randint(0, 172, (1, 4, 4))
    perm = torch.randperm(16)
    shuffled = logits.reshape(1, 172, 16)[..., perm].reshape(1, 172, 4, 4)
    assert float(semantic_loss(shuffled, gt.reshape(1, 16)[:, perm].reshape(1, 4, 4))) == pytest.approx(
        float(semantic_loss(logits, gt)), abs=1e-12)
    with pytest.raises(ShapeError):
        semantic_loss(uniform, torch.zeros(2, 10, 10, dtype=torch.long))
    with pytest.raises(ShapeError):
        semantic_loss(uniform, torch.zeros(3, 16, 16, dtype=torch.long))


def test_caption_loss_examples():
    tgt = torch.tensor([[5, 6, 2, 0, 0]])
    perfect = torch.nn.functional.one_hot(tgt, 10).double() * 1e4
    assert float(caption_loss(perfect, tgt)) == pytest.approx(0.0, abs=1e-9)
    with pytest.warns(UserWarning):
        assert float(caption_loss(torch.randn(1, 3, 10), torch.zeros(1, 3, dtype=torch.long))) == 0.0
    logits = torch.randn(1, 5, 10, dtype=torch.float64)
    other = logits.clone()
    other[0, 3:] = torch.randn(2, 10, dtype=torch.float64)
    assert float(caption_loss(logits, tgt)) == float(caption_loss(other, tgt))


def test_total_loss():
    comps = {"det": torch.tensor(1.0), "mask": torch.tensor(2.0), "sem": torch.tensor(3.0), "cap": torch.tensor(4.0)}
    assert float(total_loss(comps, LossWeights())) == 10.0
    vals = [float(total_loss(comps, LossWeights(w_cap=w))) for w in (0.0, 1.0, 2.0)]
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0])
    with pytest.raises(NonFiniteLoss, match="sem"):
        total_loss({**comps, "sem": torch.tensor(float("nan"))}, LossWeights(), "step 3")
    with pytest.raises(ValueError):
        LossWeights(w_det=-1)


def test_weight_scaling_of_gradients():
    model, loss = micro_problem()
    dec = list(model.caption_head.parameters())

    def grads(w):
        model.zero_grad(set_to_none=True)
        total_loss({"cap": loss("cap")}, LossWeights(w_cap=w)).backward()
        return [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in dec]

    g1, g2, g0 = grads(1.0), grads(2.0), grads(0.0)
    assert all(torch.allclose(b, 2 * a) for a, b in zip(g1, g2))
    assert all((z == 0).all() for z in g0)


@pytest.mark.parametrize("task", GRAD_TASKS)
def test_finite_difference_gradients(task):
    model, loss = micro_problem()
    errs = finite_difference_errors(model, lambda: loss(task), n=20)
    assert max(errs) <= 1e-3
