"""Shared ELAN backbone with implicit latents and the four task heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import (
    NUM_INSTANCE_CLASSES,
    NUM_SEMANTIC_CLASSES,
    Box,
    ContractError,
    Detection,
    ShapeError,
    nms,
)

STRIDES = (8, 16, 32)
# channel widths at multiplier 1.0
FULL_NECK_CHANNELS = (128, 256, 512)
FULL_BACKBONE_CHANNELS = (32, 64, 128, 256, 512)
ELAN_BASE_DEPTH = 4
MULTI_SCALE_LATERAL = 64
MULTI_SCALE_FUSE = 128


@dataclass
class ModelConfig:
    width: float = 0.25
    depth: float = 0.33
    num_classes: int = NUM_INSTANCE_CLASSES
    num_protos: int = 32
    num_semantic: int = NUM_SEMANTIC_CLASSES
    vocab_size: int = 1000
    dec_layers: int = 2
    dec_heads: int = 4
    dec_dim: int = 128
    dec_ffn: int = 256
    max_caption_len: int = 32
    caption_encoder_layers: int = 0
    caption_source: str = "neck"
    semantic_mode: str = "single"
    implicit: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("width", "depth", "num_classes", "num_protos", "num_semantic", "vocab_size",
                     "dec_layers", "dec_heads", "dec_dim", "dec_ffn", "max_caption_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.dec_dim % self.dec_heads:
            raise ValueError("dec_dim must be divisible by dec_heads")
        if self.semantic_mode not in ("single", "multi"):
            raise ValueError(f"unknown semantic_mode {self.semantic_mode!r}")
        if self.caption_source not in ("neck", "heads"):
            raise ValueError(f"unknown caption_source {self.caption_source!r}")

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    @property
    def neck_channels(self):
        return tuple(self.ch(c) for c in FULL_NECK_CHANNELS)

    @property
    def elan_depth(self) -> int:
        return max(1, int(round(ELAN_BASE_DEPTH * self.depth)))

    @property
    def det_channels(self) -> int:
        return 4 + 1 + self.num_classes + self.num_protos

    def to_dict(self) -> dict:
        return asdict(self)


class Conv(nn.Module):
    def __init__(self, c_in, c_out, k=1, s=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class ELAN(nn.Module):
    """Two 1x1 branches, a chain of 3x3 convs on one, all outputs concatenated and fused."""

    def __init__(self, c_in, c_out, n=2, hidden=None):
        super().__init__()
        h = hidden or max(1, c_out // 2)
        self.cv1 = Conv(c_in, h)
        self.cv2 = Conv(c_in, h)
        self.chain = nn.ModuleList(Conv(h, h, 3) for _ in range(n))
        self.fuse = Conv(h * (2 + n), c_out)

    def forward(self, x):
        outs = [self.cv1(x), self.cv2(x)]
        y = outs[-1]
        for conv in self.chain:
            y = conv(y)
            outs.append(y)
        return self.fuse(torch.cat(outs, 1))


class ImplicitLatent(nn.Module):
    """Channel-wise learned multiplicative (init 1) and additive (init 0) latents."""

    def __init__(self, channels: int):
        super().__init__()
        self.add = nn.Parameter(torch.zeros(channels))
        self.mul = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        return implicit_apply(x, self.add, self.mul)


def implicit_apply(feature: Tensor, add: Tensor, mul: Tensor) -> Tensor:
    c = feature.shape[1]
    if add.numel() not in (1, c) or mul.numel() not in (1, c):
        raise ShapeError(f"latents of size {add.numel()}/{mul.numel()} do not broadcast to {c} channels")
    shape = (1, -1) + (1,) * (feature.dim() - 2)
    return feature * mul.reshape(shape) + add.reshape(shape)


def _implicit(cfg: ModelConfig, channels: int) -> nn.Module:
    return ImplicitLatent(channels) if cfg.implicit else nn.Identity()


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = [cfg.ch(x) for x in FULL_BACKBONE_CHANNELS]
        n = cfg.elan_depth
        self.stem = nn.Sequential(Conv(3, c[0], 3, 2), Conv(c[0], c[1], 3, 2), ELAN(c[1], c[2], n))
        self.stage3 = nn.Sequential(Conv(c[2], c[2], 3, 2), ELAN(c[2], c[3], n))
        self.stage4 = nn.Sequential(Conv(c[3], c[3], 3, 2), ELAN(c[3], c[4], n))
        self.stage5 = nn.Sequential(Conv(c[4], c[4], 3, 2), ELAN(c[4], c[4], n))
        self.out_channels = (c[3], c[4], c[4])

    def forward(self, x):
        x = self.stem(x)
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


class Neck(nn.Module):
    """Top-down then bottom-up aggregation producing the stride 8/16/32 pyramid."""

    def __init__(self, cfg: ModelConfig, in_channels):
        super().__init__()
        o3, o4, o5 = cfg.neck_channels
        i3, i4, i5 = in_channels
        n = cfg.elan_depth
        self.reduce5 = Conv(i5, o4)
        self.lat4 = Conv(i4, o4)
        self.td4 = ELAN(2 * o4, o4, n)
        self.reduce4 = Conv(o4, o3)
        self.lat3 = Conv(i3, o3)
        self.td3 = ELAN(2 * o3, o3, n)
        self.down3 = Conv(o3, o4, 3, 2)
        self.bu4 = ELAN(2 * o4, o4, n)
        self.down4 = Conv(o4, o4, 3, 2)
        self.bu5 = ELAN(2 * o4, o5, n)

    def forward(self, feats):
        c3, c4, c5 = feats
        t5 = self.reduce5(c5)
        t4 = self.td4(torch.cat([F.interpolate(t5, scale_factor=2.0, mode="nearest"), self.lat4(c4)], 1))
        r4 = self.reduce4(t4)
        p8 = self.td3(torch.cat([F.interpolate(r4, scale_factor=2.0, mode="nearest"), self.lat3(c3)], 1))
        p16 = self.bu4(torch.cat([self.down3(p8), t4], 1))
        p32 = self.bu5(torch.cat([self.down4(p16), t5], 1))
        return p8, p16, p32


@dataclass
class FeaturePyramid:
    p8: Tensor
    p16: Tensor
    p32: Tensor

    def levels(self):
        return (self.p8, self.p16, self.p32)


class DetectionHead(nn.Module):
    """Anchor-free per-location head: 4 edge distances, objectness, class logits, mask coefficients."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.no = cfg.det_channels
        self.implicit = nn.ModuleList(_implicit(cfg, c) for c in cfg.neck_channels)
        self.stems = nn.ModuleList(Conv(c, c, 3) for c in cfg.neck_channels)
        self.preds = nn.ModuleList(nn.Conv2d(c, self.no, 1) for c in cfg.neck_channels)

    def forward(self, pyramid: FeaturePyramid) -> List[Tensor]:
        maps = []
        for x, imp, stem, pred in zip(pyramid.levels(), self.implicit, self.stems, self.preds):
            y = pred(stem(imp(x)))
            maps.append(y.permute(0, 2, 3, 1).contiguous())
        return maps


class PrototypeHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.neck_channels[0]
        self.implicit = _implicit(cfg, c)
        self.cv1 = Conv(c, c, 3)
        self.cv2 = Conv(c, c, 3)
        self.out = nn.Conv2d(c, cfg.num_protos, 1)

    def forward(self, p8: Tensor) -> Tensor:
        x = self.cv1(self.implicit(p8))
        x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        return self.out(self.cv2(x))


class SingleScaleSemanticHead(nn.Module):
    """Stride-8 feature -> one conv block -> x2 upsample -> per-class logits at stride 4."""

    def __init__(self, cfg: ModelConfig, in_channels: Optional[int] = None):
        super().__init__()
        c = in_channels or cfg.neck_channels[0]
        mid = max(1, c // 4)
        self.implicit = _implicit(cfg, c)
        self.conv = Conv(c, mid, 3)
        self.out = nn.Conv2d(mid, cfg.num_semantic, 1)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        x = self.conv(self.implicit(pyramid.p8))
        x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        return self.out(x)


class MultiScaleSemanticHead(nn.Module):
    """Fuses all three pyramid levels at stride 8 before the stride-4 prediction."""

    def __init__(self, cfg: ModelConfig, in_channels=None):
        super().__init__()
        chans = in_channels or cfg.neck_channels
        lat, fuse = cfg.ch(MULTI_SCALE_LATERAL), cfg.ch(MULTI_SCALE_FUSE)
        self.implicit = nn.ModuleList(_implicit(cfg, c) for c in chans)
        self.lateral = nn.ModuleList(Conv(c, lat, 3) for c in chans)
        self.fuse = Conv(3 * lat, fuse, 3)
        self.out = nn.Conv2d(fuse, cfg.num_semantic, 1)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        size = pyramid.p8.shape[-2:]
        feats = []
        for x, imp, conv in zip(pyramid.levels(), self.implicit, self.lateral):
            y = conv(imp(x))
            if y.shape[-2:] != size:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            feats.append(y)
        x = self.fuse(torch.cat(feats, 1))
        x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        return self.out(x)


def semantic_head(cfg: ModelConfig, mode: Optional[str] = None, in_channels=None) -> nn.Module:
    mode = mode or cfg.semantic_mode
    if mode == "single":
        return SingleScaleSemanticHead(cfg, None if in_channels is None else in_channels[0])
    if mode == "multi":
        return MultiScaleSemanticHead(cfg, in_channels)
    raise ValueError(f"unknown semantic head mode {mode!r}")


class CaptionHead(nn.Module):
    """Transformer text decoder cross-attending to flattened stride-32 features.

    With ``caption_encoder_layers > 0`` a transformer encoder runs over the
    memory tokens first (the full encoder-decoder variant).
    """

    MAX_GRID = 64

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dec_dim
        self.cfg = cfg
        self.memory_proj = nn.Linear(cfg.neck_channels[2], d)
        self.row_embed = nn.Embedding(self.MAX_GRID, d)
        self.col_embed = nn.Embedding(self.MAX_GRID, d)
        self.head_proj = nn.Linear(cfg.det_channels, d) if cfg.caption_source == "heads" else None
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Embedding(cfg.max_caption_len, d)
        layer = nn.TransformerDecoderLayer(d, cfg.dec_heads, cfg.dec_ffn, cfg.dropout,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.dec_layers)
        self.encoder = None
        if cfg.caption_encoder_layers > 0:
            enc_layer = nn.TransformerEncoderLayer(d, cfg.dec_heads, cfg.dec_ffn, cfg.dropout,
                                                   activation="gelu", batch_first=True, norm_first=True)
            self.encoder = nn.TransformerEncoder(enc_layer, cfg.caption_encoder_layers,
                                                 enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.vocab_size)

    def memory(self, p32: Tensor, head_map: Optional[Tensor] = None) -> Tensor:
        b, _, h, w = p32.shape
        if h > self.MAX_GRID or w > self.MAX_GRID:
            raise ShapeError(f"stride-32 grid {h}x{w} exceeds {self.MAX_GRID}")
        tokens = self.memory_proj(p32.flatten(2).transpose(1, 2))
        rows = torch.arange(h, device=p32.device)
        cols = torch.arange(w, device=p32.device)
        pos = (self.row_embed(rows)[:, None, :] + self.col_embed(cols)[None, :, :]).reshape(h * w, -1)
        mem = tokens + pos
        if self.head_proj is not None and head_map is not None:
            mem = torch.cat([mem, self.head_proj(head_map.reshape(b, h * w, -1)) + pos], 1)
        if self.encoder is not None:
            mem = self.encoder(mem)
        return mem

    def forward(self, memory: Tensor, tokens: Tensor) -> Tensor:
        t = tokens.shape[1]
        if t > self.cfg.max_caption_len:
            raise ShapeError(f"token length {t} exceeds max_caption_len {self.cfg.max_caption_len}")
        pos = torch.arange(t, device=tokens.device)
        x = self.token_embed(tokens) + self.pos_embed(pos)[None]
        mask = torch.triu(torch.full((t, t), float("-inf"), device=tokens.device, dtype=x.dtype), 1)
        y = self.decoder(x, memory, tgt_mask=mask)
        return self.out(self.norm(y))


@dataclass
class NetworkOutputs:
    pyramid: FeaturePyramid
    det_maps: List[Tensor] = field(default_factory=list)
    prototypes: Optional[Tensor] = None
    semantic: Optional[Tensor] = None
    caption_logits: Optional[Tensor] = None
    memory: Optional[Tensor] = None


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.neck = Neck(cfg, self.backbone.out_channels)
        self.det_head = DetectionHead(cfg)
        self.proto_head = PrototypeHead(cfg)
        self.sem_head = semantic_head(cfg)
        self.caption_head = CaptionHead(cfg)

    def encoder_modules(self):
        return [self.backbone, self.neck, self.det_head, self.proto_head, self.sem_head]

    def decoder_modules(self):
        return [self.caption_head]

    def backbone_forward(self, images: Tensor) -> FeaturePyramid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")
        return FeaturePyramid(*self.neck(self.backbone(images)))

    def forward(self, images: Tensor, tokens: Optional[Tensor] = None,
                tasks: Sequence[str] = ("det", "mask", "sem")) -> NetworkOutputs:
        pyr = self.backbone_forward(images)
        out = NetworkOutputs(pyramid=pyr)
        need_det = "det" in tasks or "mask" in tasks or (tokens is not None and self.cfg.caption_source == "heads")
        if need_det:
            out.det_maps = self.det_head(pyr)
        if "mask" in tasks:
            out.prototypes = self.proto_head(pyr.p8)
        if "sem" in tasks:
            out.semantic = self.sem_head(pyr)
        if tokens is not None:
            out.memory = self.caption_head.memory(pyr.p32, out.det_maps[2] if out.det_maps else None)
            out.caption_logits = self.caption_head(out.memory, tokens)
        return out

    def caption_memory(self, images: Tensor) -> Tensor:
        pyr = self.backbone_forward(images)
        head_map = self.det_head(pyr)[2] if self.cfg.caption_source == "heads" else None
        return self.caption_head.memory(pyr.p32, head_map)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- decoding ------------------------------------------------------------------

def anchor_points(h: int, w: int, stride: int, device=None, dtype=torch.float32) -> Tensor:
    ys, xs = torch.meshgrid(torch.arange(h, device=device, dtype=dtype),
                            torch.arange(w, device=device, dtype=dtype), indexing="ij")
    return torch.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], -1)


def decode_boxes(box_raw: Tensor, stride: int) -> Tensor:
    """(..., H, W, 4) raw edge distances -> (..., H, W, 4) corner boxes in pixels."""
    h, w = box_raw.shape[-3:-1]
    pts = anchor_points(h, w, stride, box_raw.device, box_raw.dtype)
    dist = F.softplus(box_raw) * stride
    return torch.cat([pts - dist[..., :2], pts + dist[..., 2:]], -1)


def flatten_predictions(det_maps: Sequence[Tensor], num_classes: int):
    """Concatenate all levels: boxes (B, N, 4), obj (B, N), cls (B, N, C), coeffs (B, N, K)."""
    boxes, obj, cls, coef = [], [], [], []
    for m, s in zip(det_maps, STRIDES):
        b = m.shape[0]
        boxes.append(decode_boxes(m[..., :4], s).reshape(b, -1, 4))
        obj.append(m[..., 4].reshape(b, -1))
        cls.append(m[..., 5:5 + num_classes].reshape(b, -1, num_classes))
        coef.append(torch.tanh(m[..., 5 + num_classes:]).reshape(b, -1, m.shape[-1] - 5 - num_classes))
    return torch.cat(boxes, 1), torch.cat(obj, 1), torch.cat(cls, 1), torch.cat(coef, 1)


@torch.no_grad()
def postprocess(det_maps: Sequence[Tensor], image_size, num_classes: int = NUM_INSTANCE_CLASSES,
                conf_threshold: float = 0.001, iou_threshold: float = 0.65,
                max_det: int = 100) -> List[List[Detection]]:
    """Decode, score-filter, and category-aware NMS per image."""
    h, w = image_size
    boxes, obj, cls, coef = flatten_predictions(det_maps, num_classes)
    scores_all = torch.sigmoid(obj)[..., None] * torch.sigmoid(cls)
    results = []
    for bi in range(boxes.shape[0]):
        score, cat = scores_all[bi].max(-1)
        keep = torch.nonzero(score > conf_threshold).flatten()
        # bound the NMS input to the highest-scoring candidates
        if keep.numel() > 30 * max_det:
            keep = keep[torch.argsort(score[keep], descending=True, stable=True)[:30 * max_det]]
        dets = []
        for i in keep.tolist():
            bx = boxes[bi, i].double().clamp(min=0)
            x1, y1, x2, y2 = (float(v) for v in bx)
            x1, x2 = min(x1, w), min(x2, w)
            y1, y2 = min(y1, h), min(y2, h)
            if x2 <= x1 or y2 <= y1:
                continue
            dets.append(Detection(Box(x1, y1, x2, y2), float(score[i]), int(cat[i]),
                                  coef[bi, i].double().cpu().numpy()))
        results.append(nms(dets, iou_threshold)[:max_det])
    return results


def mask_logits(prototypes: Tensor, coefficients: Tensor) -> Tensor:
    """(K, H, W) prototypes and (N, K) coefficients -> (N, H, W) linear combination."""
    return torch.einsum("nk,khw->nhw", coefficients, prototypes)


def assemble_masks(prototypes, detections: Sequence[Detection], image_size, threshold: float = 0.5,
                   return_probs: bool = False) -> np.ndarray:
    """Per-detection binary masks at image resolution.

    The coefficient-weighted prototype sum is upsampled to the image size,
    passed through a sigmoid, cropped to the detection box, and kept where
    strictly above ``threshold``.
    """
    h, w = image_size
    protos = torch.as_tensor(np.asarray(prototypes) if not isinstance(prototypes, Tensor) else prototypes)
    protos = protos.detach().double()
    k = protos.shape[0]
    if not detections:
        return np.zeros((0, h, w), dtype=np.float64 if return_probs else bool)
    coeffs = []
    for d in detections:
        if d.mask_coefficients is None:
            raise ContractError("detection carries no mask coefficients")
        c = np.asarray(d.mask_coefficients, dtype=np.float64).ravel()
        if c.size != k:
            raise ContractError(f"coefficient length {c.size} != prototype count {k}")
        coeffs.append(c)
    logits = mask_logits(protos, torch.from_numpy(np.stack(coeffs)))
    if logits.shape[-2:] != (h, w):
        logits = F.interpolate(logits[None], size=(h, w), mode="bilinear", align_corners=False)[0]
    probs = torch.sigmoid(logits).numpy()
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    for i, d in enumerate(detections):
        b = d.box
        inside = (xs >= b.x1) & (xs < b.x2) & (ys >= b.y1) & (ys < b.y2)
        probs[i] = np.where(inside, probs[i], 0.0)
    if return_probs:
        return probs
    return probs > threshold


# -- caption generation ---------------------------------------------------------

@torch.no_grad()
def generate_caption(head: CaptionHead, memory: Tensor, max_len: int, mode: str = "greedy",
                     beam_width: int = 3, bos: int = 1, eos: int = 2) -> List[List[int]]:
    """Decode token ids (without bos/eos) for every memory in the batch."""
    steps = min(max_len, head.cfg.max_caption_len - 1)
    if mode == "greedy":
        return _greedy(head, memory, steps, bos, eos)
    if mode == "beam":
        return [_beam(head, memory[i:i + 1], steps, beam_width, bos, eos) for i in range(memory.shape[0])]
    raise ValueError(f"unknown decoding mode {mode!r}")


def _greedy(head, memory, steps, bos, eos):
    b = memory.shape[0]
    seq = torch.full((b, 1), bos, dtype=torch.long, device=memory.device)
    done = torch.zeros(b, dtype=torch.bool, device=memory.device)
    for _ in range(steps):
        nxt = head(memory, seq)[:, -1].argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, eos), nxt)
        seq = torch.cat([seq, nxt[:, None]], 1)
        done |= nxt == eos
        if done.all():
            break
    out = []
    for row in seq[:, 1:].tolist():
        out.append(row[:row.index(eos)] if eos in row else row)
    return out


def _beam(head, memory, steps, width, bos, eos):
    beams = [([bos], 0.0)]
    finished = []
    for _ in range(steps):
        seqs = torch.tensor([s for s, _ in beams], dtype=torch.long, device=memory.device)
        logits = head(memory.expand(len(beams), -1, -1), seqs)[:, -1]
        logp = torch.log_softmax(logits.double(), -1).cpu().numpy()
        cand = []
        for (seq, score), row in zip(beams, logp):
            for tok in np.argsort(-row, kind="stable")[:width]:
                cand.append((score + float(row[tok]), seq + [int(tok)]))
        cand.sort(key=lambda c: -c[0])
        beams = []
        for score, seq in cand:
            if seq[-1] == eos:
                finished.append((seq, score))
            else:
                beams.append((seq, score))
                if len(beams) == width:
                    break
        # scores only decrease, so a finished hypothesis above every live beam is final
        if not beams or (finished and max(f[1] for f in finished) >= beams[0][1]):
            break
    best = max(finished or beams, key=lambda x: x[1])[0]
    return [t for t in best[1:] if t != eos]
