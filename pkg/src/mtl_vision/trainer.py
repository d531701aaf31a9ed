"""Optimizer construction, the joint train step, evaluation and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import cv2
import numpy as np
import torch

from .augment import AugConfig, AugmentedViews, letterbox_geometry, make_views, weak_transform
from .cocodata import PAD, Vocabulary, decode_caption, encode_caption
from .core import Box, Detection, Sample, clip_box
from .losses import (
    LossWeights,
    assign_detection_targets,
    caption_loss,
    detection_loss,
    instance_mask_loss,
    semantic_loss,
    total_loss,
)
from .metrics import (
    APAccumulator,
    BleuAccumulator,
    ConfusionAccumulator,
    ImagePredictions,
    ImageTargets,
    MetricReport,
)
from .network import (
    ModelConfig,
    MultiTaskNet,
    assemble_masks,
    generate_caption,
    postprocess,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MTLCKPT\0"
CHECKPOINT_VERSION = 1


class PartitionError(ValueError):
    pass


class RangeError(ValueError):
    pass


class ChecksumError(ValueError):
    pass


class VersionError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    l_ie: float = 1e-4
    l_td: float = 1e-4
    weight_decay: float = 0.01
    total_steps: int = 1000
    final_lr_fraction: float = 0.0
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.l_ie <= 0 or self.l_td <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must lie in [0, 1]")


@dataclass
class EvalConfig:
    conf_threshold: float = 0.001
    iou_threshold: float = 0.65
    max_det: int = 100
    caption_mode: str = "greedy"
    beam_width: int = 3
    semantic_subset: Optional[List[int]] = None
    batch_size: int = 8


def build_optimizer(model: MultiTaskNet, cfg: OptimizerConfig) -> torch.optim.AdamW:
    """AdamW with an image-encoder group at ``l_ie`` and a text-decoder group at ``l_td``."""
    enc = [p for m in model.encoder_modules() for p in m.parameters() if p.requires_grad]
    dec = [p for m in model.decoder_modules() for p in m.parameters() if p.requires_grad]
    enc_ids, dec_ids = {id(p) for p in enc}, {id(p) for p in dec}
    shared = enc_ids & dec_ids
    if shared:
        raise PartitionError(f"{len(shared)} parameters claimed by both optimizer groups")
    everything = {id(p) for p in model.parameters() if p.requires_grad}
    if enc_ids | dec_ids != everything:
        raise PartitionError(f"{len(everything - enc_ids - dec_ids)} trainable parameters in no group")
    groups = [
        {"params": enc, "lr": cfg.l_ie, "name": "encoder", "base_lr": cfg.l_ie},
        {"params": dec, "lr": cfg.l_td, "name": "decoder", "base_lr": cfg.l_td},
    ]
    return torch.optim.AdamW(groups, lr=cfg.l_ie, betas=cfg.betas, weight_decay=cfg.weight_decay)


def lr_at_step(step: int, cfg: OptimizerConfig) -> Dict[str, float]:
    """Linear decay from the base rates to ``final_lr_fraction`` of them over ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise RangeError(f"step {step} outside [0, {cfg.total_steps}]")
    frac = 1.0 - step / cfg.total_steps
    scale = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * frac
    return {"encoder": cfg.l_ie * scale, "decoder": cfg.l_td * scale}


# -- batching ------------------------------------------------------------------

@dataclass
class VisionBatch:
    images: torch.Tensor
    boxes: List[np.ndarray]
    labels: List[np.ndarray]
    masks: List[np.ndarray]
    semantic: torch.Tensor
    image_ids: List[int]


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(im) for im in images]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def collate_vision(samples: Sequence[Sample], dtype=torch.float32) -> VisionBatch:
    boxes, labels, masks = [], [], []
    for s in samples:
        boxes.append(np.array([a.box.as_array() for a in s.instances], dtype=np.float64).reshape(-1, 4))
        labels.append(np.array([a.category for a in s.instances], dtype=np.int64))
        masks.append(np.stack([a.mask for a in s.instances]) if s.instances
                     else np.zeros((0,) + s.semantic.shape, dtype=bool))
    return VisionBatch(images_to_tensor([s.image for s in samples], dtype), boxes, labels, masks,
                       torch.from_numpy(np.stack([s.semantic for s in samples]).astype(np.int64)),
                       [s.image_id for s in samples])


def collate_captions(samples: Sequence[Sample], vocab: Vocabulary, max_len: int,
                     rng: np.random.Generator) -> torch.Tensor:
    """One caption per sample, chosen by ``rng``; samples without captions become all-pad rows."""
    rows = []
    for s in samples:
        if s.captions:
            rows.append(encode_caption(s.captions[int(rng.integers(len(s.captions)))], vocab, max_len))
        else:
            rows.append([PAD] * max_len)
    return torch.tensor(rows, dtype=torch.long)


# -- training ------------------------------------------------------------------

def vision_losses(model: MultiTaskNet, batch: VisionBatch, tasks=("det", "mask", "sem")) -> Dict[str, torch.Tensor]:
    h, w = batch.images.shape[-2:]
    out = model(batch.images, tasks=tasks)
    assigns = [assign_detection_targets(b, (h, w)) for b in batch.boxes]
    comps: Dict[str, torch.Tensor] = {}
    nc = model.cfg.num_classes
    if "det" in tasks:
        det = detection_loss(out.det_maps, assigns, batch.boxes, batch.labels, nc)
        comps.update(det=det["total"], box=det["box"], obj=det["obj"], cls=det["cls"])
    if "mask" in tasks:
        comps["mask"] = instance_mask_loss(out.prototypes, out.det_maps, assigns, batch.boxes, batch.masks, nc)
    if "sem" in tasks:
        comps["sem"] = semantic_loss(out.semantic, batch.semantic)
    return comps


def caption_forward_loss(model: MultiTaskNet, images: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    out = model(images, tokens=ids[:, :-1], tasks=())
    return caption_loss(out.caption_logits, ids[:, 1:])


def train_step(model: MultiTaskNet, views: AugmentedViews, optimizer: torch.optim.Optimizer,
               weights: LossWeights, vocab: Vocabulary, step: int, opt_cfg: OptimizerConfig,
               rng: np.random.Generator, max_len: int = 32) -> Dict:
    """Strong view -> vision losses, weak view -> caption loss, one shared update."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    dtype = next(model.parameters()).dtype
    w = weights.as_dict()
    context = f"step {step}, images {views.provenance}"

    vis_tasks = tuple(t for t in ("det", "mask", "sem") if w[t] > 0)
    comps: Dict[str, torch.Tensor] = {}
    if vis_tasks:
        comps.update(vision_losses(model, collate_vision(views.strong, dtype), vis_tasks))
        vis_total = total_loss({t: comps[t] for t in vis_tasks}, weights, context)
        vis_total.backward()
    if w["cap"] > 0:
        ids = collate_captions(views.weak, vocab, max_len, rng)
        images = images_to_tensor([s.image for s in views.weak], dtype)
        comps["cap"] = caption_forward_loss(model, images, ids)
        total_loss({"cap": comps["cap"]}, weights, context).backward()

    lrs = lr_at_step(step, opt_cfg)
    for g in optimizer.param_groups:
        g["lr"] = lrs[g["name"]]
    optimizer.step()

    record = {"step": step, "lr": lrs}
    for k in ("det", "box", "obj", "cls", "mask", "sem", "cap"):
        record[k] = float(comps[k].detach()) if k in comps else 0.0
    record["total"] = sum(w[t] * record[t] for t in ("det", "mask", "sem", "cap"))
    return record


# -- inference -----------------------------------------------------------------

@dataclass
class Prediction:
    detections: list
    masks: np.ndarray
    semantic: np.ndarray
    caption: str
    tokens: List[int] = field(default_factory=list)


@torch.no_grad()
def predict_batch(model: MultiTaskNet, images: Sequence[np.ndarray], vocab: Vocabulary,
                  cfg: EvalConfig, max_len: int = 32) -> List[Prediction]:
    """Inference on images that are already at network resolution."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = images_to_tensor(images, dtype)
    h, w = x.shape[-2:]
    out = model(x, tasks=("det", "mask", "sem"))
    dets = postprocess(out.det_maps, (h, w), model.cfg.num_classes, cfg.conf_threshold,
                       cfg.iou_threshold, cfg.max_det)
    sem = out.semantic.argmax(1)
    scale = h // sem.shape[-2]
    sem = sem.repeat_interleave(scale, 1).repeat_interleave(scale, 2).numpy()
    memory = model.caption_head.memory(out.pyramid.p32, out.det_maps[2])
    tokens = generate_caption(model.caption_head, memory, max_len, cfg.caption_mode, cfg.beam_width)
    preds = []
    for i in range(x.shape[0]):
        masks = assemble_masks(out.prototypes[i], dets[i], (h, w))
        preds.append(Prediction(dets[i], masks, sem[i], decode_caption(tokens[i], vocab), tokens[i]))
    return preds


def evaluate_all(model: MultiTaskNet, samples: Sequence[Sample], vocab: Vocabulary,
                 cfg: Optional[EvalConfig] = None, target_size: int = 640, max_len: int = 32) -> MetricReport:
    """Score every task on ``samples``, each letterboxed to ``target_size``."""
    cfg = cfg or EvalConfig()
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    box_acc, mask_acc = APAccumulator("box"), APAccumulator("mask")
    conf, bleu = ConfusionAccumulator(model.cfg.num_semantic), BleuAccumulator()
    for start in range(0, len(samples), cfg.batch_size):
        chunk = [weak_transform(s, target_size) for s in samples[start:start + cfg.batch_size]]
        preds = predict_batch(model, [s.image for s in chunk], vocab, cfg, max_len)
        for s, p in zip(chunk, preds):
            gt = collate_vision([s])
            boxes = np.array([d.box.as_array() for d in p.detections]).reshape(-1, 4)
            scores = np.array([d.score for d in p.detections])
            labels = np.array([d.category for d in p.detections], dtype=np.int64)
            pred = ImagePredictions(boxes, scores, labels, p.masks)
            target = ImageTargets(gt.boxes[0], gt.labels[0], gt.masks[0])
            box_acc.add(pred, target)
            mask_acc.add(pred, target)
            conf.add(p.semantic, s.semantic)
            if s.captions:
                bleu.add(p.caption, s.captions)
    box_ap, box_flag = box_acc.result()
    mask_ap, _ = mask_acc.result()
    miou, fwiou = conf.result(cfg.semantic_subset)
    flags = [] if box_flag is None else [f"ap:{box_flag}"]
    b4 = bleu.result() if bleu.count else 0.0
    if not bleu.count:
        flags.append("bleu:no-captions")
    per_cat = {"box_ap": {str(k): v for k, v in box_acc.per_category().items()},
               "mask_ap": {str(k): v for k, v in mask_acc.per_category().items()},
               "iou": {str(k): float(v) for k, v in conf.per_category(cfg.semantic_subset).items()}}
    return MetricReport(box_ap, mask_ap, miou, fwiou, b4, per_cat, len(samples), flags)


def to_network_frame(image: np.ndarray, target_size: int):
    """Letterbox an arbitrary image; returns the padded image and (scale, left, top, new_w, new_h)."""
    h, w = image.shape[:2]
    scale, nw, nh, left, top = letterbox_geometry(w, h, target_size)
    resized = image if (nw, nh) == (w, h) else cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((target_size, target_size, 3), 114, dtype=np.uint8)
    canvas[top:top + nh, left:left + nw] = resized
    return canvas, (scale, left, top, nw, nh)


def map_to_original(pred: Prediction, geometry, image_size) -> Prediction:
    """Undo the letterbox: boxes, masks and semantic raster in source-image coordinates."""
    scale, left, top, nw, nh = geometry
    h, w = image_size
    dets, keep = [], []
    for i, d in enumerate(pred.detections):
        b = d.box
        box = clip_box(Box((b.x1 - left) / scale, (b.y1 - top) / scale,
                           (b.x2 - left) / scale, (b.y2 - top) / scale), w, h)
        if box is None:
            continue
        dets.append(Detection(box, d.score, d.category, d.mask_coefficients))
        keep.append(i)

    def unpad(arr, interp):
        crop = np.ascontiguousarray(arr[top:top + nh, left:left + nw])
        if crop.shape[:2] == (h, w):
            return crop
        return cv2.resize(crop, (w, h), interpolation=interp)

    masks = np.zeros((len(keep), h, w), dtype=bool)
    for j, i in enumerate(keep):
        masks[j] = unpad(pred.masks[i].astype(np.uint8), cv2.INTER_NEAREST) > 0
    semantic = unpad(pred.semantic.astype(np.int32), cv2.INTER_NEAREST).astype(np.int64)
    return Prediction(dets, masks, semantic, pred.caption, list(pred.tokens))


def predict_images(model: MultiTaskNet, images: Sequence[np.ndarray], vocab: Vocabulary,
                   cfg: EvalConfig, target_size: int, max_len: int = 32) -> List[Prediction]:
    """Letterbox arbitrary RGB images, run every head, and map results back."""
    out = []
    for start in range(0, len(images), cfg.batch_size):
        chunk = images[start:start + cfg.batch_size]
        framed = [to_network_frame(im, target_size) for im in chunk]
        preds = predict_batch(model, [f[0] for f in framed], vocab, cfg, max_len)
        out += [map_to_original(p, f[1], im.shape[:2]) for p, f, im in zip(preds, framed, chunk)]
    return out


@torch.no_grad()
def caption_images(model: MultiTaskNet, images: Sequence[np.ndarray], vocab: Vocabulary,
                   cfg: EvalConfig, target_size: int, max_len: int = 32) -> List[str]:
    """Captions only; each image is decoded independently of the others."""
    model.eval()
    dtype = next(model.parameters()).dtype
    captions = []
    for im in images:
        x = images_to_tensor([to_network_frame(im, target_size)[0]], dtype)
        tokens = generate_caption(model.caption_head, model.caption_memory(x), max_len,
                                  cfg.caption_mode, cfg.beam_width)
        captions.append(decode_caption(tokens[0], vocab))
    return captions


# -- checkpoints ---------------------------------------------------------------

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64,
           "uint8": torch.uint8, "bool": torch.bool}


@dataclass
class Checkpoint:
    version: int
    model_config: dict
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict]
    step: int
    rng_state: Dict[str, object]
    vocab: List[str]
    extra: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().tobytes()


def _dtype_name(t: torch.Tensor) -> str:
    for k, v in _DTYPES.items():
        if t.dtype == v:
            return k
    raise TypeError(f"unsupported tensor dtype {t.dtype}")


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, torch.Tensor):
        return v.item()
    return v


def save_checkpoint(path, model: MultiTaskNet, optimizer: Optional[torch.optim.Optimizer], step: int,
                    vocab: Vocabulary, extra: Optional[dict] = None) -> None:
    """Write a versioned, checksummed checkpoint (header JSON followed by raw tensor blobs)."""
    tensors: List[tuple] = [("model." + k, v) for k, v in model.state_dict().items()]
    opt_header = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        groups = []
        for g in sd["param_groups"]:
            groups.append({k: _jsonable(v) for k, v in g.items()})
        state_keys = {}
        for pid in sorted(sd["state"]):
            keys = []
            for k in sorted(sd["state"][pid]):
                v = sd["state"][pid][k]
                tensors.append((f"optim.{pid}.{k}", v if isinstance(v, torch.Tensor) else torch.tensor(v)))
                keys.append(k)
            state_keys[str(pid)] = keys
        opt_header = {"param_groups": groups, "state_keys": state_keys}
    tensors.append(("rng.torch", torch.get_rng_state()))

    index, blobs, offset = [], [], 0
    for name, t in tensors:
        data = _tensor_bytes(t)
        index.append({"name": name, "dtype": _dtype_name(t), "shape": list(t.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "model_config": model.cfg.to_dict(),
        "optimizer": opt_header,
        "step": int(step),
        "vocab": vocab.to_list(),
        "extra": _jsonable(extra or {}),
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = struct.pack("<Q", len(head)) + head + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + digest + payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:8] != CHECKPOINT_MAGIC:
        raise ChecksumError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest, payload = raw[12:44], raw[44:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path} failed its checksum")
    (hlen,) = struct.unpack("<Q", payload[:8])
    header = json.loads(payload[8:8 + hlen])
    blob = payload[8 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        np_dt = torch.empty(0, dtype=dt).numpy().dtype
        arr = np.frombuffer(blob, dtype=np_dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    opt_state = None
    if header["optimizer"] is not None:
        state = {}
        for pid, keys in header["optimizer"]["state_keys"].items():
            state[int(pid)] = {k: tensors[f"optim.{pid}.{k}"] for k in keys}
        groups = header["optimizer"]["param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        opt_state = {"state": state, "param_groups": groups}
    return Checkpoint(version, header["model_config"], model_state, opt_state, header["step"],
                      {"torch": tensors["rng.torch"]}, header["vocab"], header["extra"])


def restore(ckpt: Checkpoint, model: Optional[MultiTaskNet] = None,
            optimizer: Optional[torch.optim.Optimizer] = None, restore_rng: bool = True):
    """Materialize (or fill) the model and optimizer from a checkpoint."""
    cfg = ModelConfig(**ckpt.model_config)
    if model is None:
        model = MultiTaskNet(cfg)
    dtype = next(iter(ckpt.model_state.values())).dtype
    if dtype.is_floating_point:
        model.to(dtype)
    model.load_state_dict(ckpt.model_state)
    if optimizer is not None and ckpt.optimizer_state is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)
    if restore_rng:
        torch.set_rng_state(ckpt.rng_state["torch"])
    return model, Vocabulary.from_list(ckpt.vocab)


# -- loop ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    checkpoint_every: int = 0
    max_caption_len: int = 32


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator so any step can be replayed without earlier state."""
    return np.random.default_rng([seed, step])


def sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def train(model: MultiTaskNet, samples: Sequence[Sample], vocab: Vocabulary, aug_cfg: AugConfig,
          opt_cfg: OptimizerConfig, weights: LossWeights, train_cfg: TrainConfig, seed: int = 0,
          optimizer: Optional[torch.optim.Optimizer] = None, start_step: int = 0,
          end_step: Optional[int] = None, log=None, checkpoint_path=None) -> List[Dict]:
    """Run steps ``[start_step, end_step)``; returns the per-step loss records.

    ``log`` is a writable text handle receiving one JSON record per step.
    """
    if not samples:
        raise ValueError("no training samples")
    optimizer = optimizer or build_optimizer(model, opt_cfg)
    end_step = opt_cfg.total_steps if end_step is None else end_step
    records = []
    for step in range(start_step, end_step):
        rng = step_rng(seed, step)
        idx = sample_batch(len(samples), train_cfg.batch_size, rng)
        views = make_views([samples[i] for i in idx], aug_cfg, rng)
        rec = train_step(model, views, optimizer, weights, vocab, step, opt_cfg, rng,
                         train_cfg.max_caption_len)
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
        if checkpoint_path and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, optimizer, step + 1, vocab, {"seed": seed})
    return records
