"""Shared fixtures-by-function for the unit and acceptance suites."""
import numpy as np
import torch

from mtl_vision.cocodata import build_vocab, encode_caption
from mtl_vision.losses import (
    assign_detection_targets,
    caption_loss,
    detection_loss,
    instance_mask_loss,
    semantic_loss,
)
from mtl_vision.network import ModelConfig, MultiTaskNet
from mtl_vision.synthetic import make_dataset
from mtl_vision.trainer import collate_vision

GRAD_TASKS = ("det", "mask", "sem", "cap")


def micro_config(**kw) -> ModelConfig:
    """About 4.5k parameters: small enough for finite differences."""
    base = dict(width=0.015, depth=0.33, num_classes=2, num_protos=2, num_semantic=4, vocab_size=8,
                dec_layers=1, dec_heads=1, dec_dim=4, dec_ffn=4, max_caption_len=6)
    base.update(kw)
    return ModelConfig(**base)


def micro_problem(seed=0):
    """A double-precision micro model plus one fixed batch and a loss closure per task."""
    torch.manual_seed(seed)
    cfg = micro_config()
    model = MultiTaskNet(cfg).double().train()
    samples = make_dataset(2, seed=seed, size=64, max_objects=2, num_shapes=2)
    batch = collate_vision(samples, torch.float64)
    # fold the merged semantic ids into the micro head's 4 classes
    sem = batch.semantic % cfg.num_semantic
    vocab = build_vocab(["a b c d"], min_freq=1)
    ids = torch.tensor([encode_caption("a b c", vocab, cfg.max_caption_len),
                        encode_caption("d c", vocab, cfg.max_caption_len)])
    assigns = [assign_detection_targets(b, (64, 64)) for b in batch.boxes]
    labels = [lab % cfg.num_classes for lab in batch.labels]

    def loss(task):
        if task == "det":
            out = model(batch.images, tasks=("det",))
            return detection_loss(out.det_maps, assigns, batch.boxes, labels, cfg.num_classes)["total"]
        if task == "mask":
            out = model(batch.images, tasks=("mask",))
            return instance_mask_loss(out.prototypes, out.det_maps, assigns, batch.boxes, batch.masks,
                                      cfg.num_classes)
        if task == "sem":
            return semantic_loss(model(batch.images, tasks=("sem",)).semantic, sem)
        out = model(batch.images, tokens=ids[:, :-1], tasks=())
        return caption_loss(out.caption_logits, ids[:, 1:])

    return model, loss


def finite_difference_errors(model, loss_fn, n=20, eps=1e-6, seed=0):
    """Relative errors |a - n| / max(|a|, |n|, 1e-10) at ``n`` random parameter entries.

    Entries are drawn uniformly from parameters that the loss depends on.
    """
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=n, replace=False)
    bounds = np.cumsum(sizes)
    errors = []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            off = int(f - (bounds[k - 1] if k else 0))
            p = params[k].view(-1)
            analytic = float(params[k].grad.view(-1)[off])
            orig = float(p[off])
            p[off] = orig + eps
            up = float(loss_fn())
            p[off] = orig - eps
            down = float(loss_fn())
            p[off] = orig
            numeric = (up - down) / (2 * eps)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10))
    return errors
