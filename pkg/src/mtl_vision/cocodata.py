"""COCO-format ingestion: instances, stuff, captions, and the caption vocabulary.

Instance and stuff category ids are merged into one 172-id semantic space:
``[0, 80)`` instance categories, ``[80, 171)`` stuff categories and
``171`` for unlabeled pixels.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .core import (
    NUM_INSTANCE_CLASSES,
    NUM_STUFF_CLASSES,
    UNLABELED_ID,
    Box,
    InstanceAnnotation,
    LabeledBox,
    Sample,
)

logger = logging.getLogger(__name__)

INDEX_FORMAT = "mtl-vision-index"
INDEX_VERSION = 1

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


class ParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


# -- RLE ---------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major runs starting with a zero run."""
    h, w = mask.shape
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [h, w], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = rle_counts_from_string(counts)
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    if pos != h * w:
        raise IntegrityError(f"RLE counts cover {pos} pixels, expected {h * w}")
    return flat.reshape((h, w), order="F")


def rle_counts_to_string(counts: Sequence[int]) -> str:
    """COCO compressed-RLE string (LEB128-like, 6 bits per char, delta from i-2)."""
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


def rle_counts_from_string(s) -> List[int]:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: List[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


# -- polygons ----------------------------------------------------------------

def rasterize_polygon(coords: Sequence[float], height: int, width: int) -> np.ndarray:
    """Even-odd fill of one polygon, sampling every pixel at its center."""
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) < 3:
        return mask
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    xs = np.arange(width) + 0.5
    for row in range(height):
        yc = row + 0.5
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        t = (yc - y0[crosses]) / (y1[crosses] - y0[crosses])
        xi = np.sort(x0[crosses] + t * (x1[crosses] - x0[crosses]))
        # count crossings to the left of each pixel center
        inside = (np.searchsorted(xi, xs, side="right") % 2) == 1
        mask[row] = inside
    return mask


def segmentation_to_mask(seg, height: int, width: int) -> np.ndarray:
    if isinstance(seg, list):
        mask = np.zeros((height, width), dtype=bool)
        for poly in seg:
            mask |= rasterize_polygon(poly, height, width)
        return mask
    if isinstance(seg, dict):
        if list(seg["size"]) != [height, width]:
            raise IntegrityError(f"RLE size {seg['size']} does not match image {height}x{width}")
        return rle_decode(seg)
    raise ParseError(f"unsupported segmentation type {type(seg).__name__}")


# -- index -------------------------------------------------------------------

@dataclass
class ImageRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    instances: List[InstanceAnnotation] = field(default_factory=list)
    semantic: Optional[np.ndarray] = None
    captions: List[str] = field(default_factory=list)


@dataclass
class DatasetIndex:
    records: Dict[int, ImageRecord]
    category_map: Dict[str, Dict[int, int]]
    image_root: Optional[str] = None
    flags: List[str] = field(default_factory=list)

    @property
    def image_ids(self) -> List[int]:
        return sorted(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, max_images: Optional[int]) -> "DatasetIndex":
        """Keep the first ``max_images`` images by sorted id."""
        if max_images is None:
            return self
        keep = self.image_ids[:max_images]
        return DatasetIndex({i: self.records[i] for i in keep}, self.category_map,
                            self.image_root, list(self.flags))

    def semantic_for(self, rec: ImageRecord) -> np.ndarray:
        if rec.semantic is not None:
            return rec.semantic
        return paint_instances(np.full((rec.height, rec.width), UNLABELED_ID, dtype=np.int64),
                               rec.instances)

    def load_image(self, rec: ImageRecord) -> np.ndarray:
        if self.image_root is None:
            raise IntegrityError("index has no image_root; cannot read pixels")
        path = Path(self.image_root) / rec.file_name
        img = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if img is None:
            raise IntegrityError(f"unreadable image {path}")
        if img.shape[:2] != (rec.height, rec.width):
            raise IntegrityError(f"image {path} is {img.shape[:2]}, annotations say "
                                 f"{(rec.height, rec.width)}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)

    def get_sample(self, image_id: int, image: Optional[np.ndarray] = None) -> Sample:
        rec = self.records[image_id]
        if image is None:
            image = self.load_image(rec)
        return Sample(image=image, instances=list(rec.instances), semantic=self.semantic_for(rec),
                      captions=list(rec.captions), image_id=rec.image_id)

    def samples(self) -> List[Sample]:
        return [self.get_sample(i) for i in self.image_ids]

    def captions(self) -> List[str]:
        return [c for i in self.image_ids for c in self.records[i].captions]

    # serialization ----------------------------------------------------------

    def to_json(self) -> str:
        recs = []
        for i in self.image_ids:
            r = self.records[i]
            entry = {
                "image_id": r.image_id, "file_name": r.file_name,
                "width": r.width, "height": r.height, "captions": r.captions,
                "instances": [
                    {"box": list(a.box.as_array()), "category": a.category,
                     "mask": _compact_rle(a.mask)}
                    for a in r.instances
                ],
            }
            if r.semantic is not None:
                entry["semantic"] = _semantic_to_json(r.semantic)
            recs.append(entry)
        cmap = {src: {str(k): v for k, v in sorted(m.items())} for src, m in sorted(self.category_map.items())}
        body = {"format": INDEX_FORMAT, "version": INDEX_VERSION, "category_map": cmap,
                "image_root": self.image_root, "flags": self.flags, "records": recs}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        body = json.loads(text)
        if body.get("format") != INDEX_FORMAT:
            raise ParseError("not a dataset index file")
        if body.get("version") != INDEX_VERSION:
            raise ParseError(f"index version {body.get('version')} != {INDEX_VERSION}")
        records = {}
        for e in body["records"]:
            insts = []
            for a in e["instances"]:
                mask = rle_decode(a["mask"])
                insts.append(InstanceAnnotation(LabeledBox(Box.from_array(a["box"]), a["category"]), mask))
            sem = _semantic_from_json(e["semantic"]) if "semantic" in e else None
            records[e["image_id"]] = ImageRecord(e["image_id"], e["file_name"], e["width"], e["height"],
                                                 insts, sem, list(e["captions"]))
        cmap = {src: {int(k): v for k, v in m.items()} for src, m in body["category_map"].items()}
        return cls(records, cmap, body["image_root"], list(body["flags"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        return cls.from_json(Path(path).read_text())


def _compact_rle(mask: np.ndarray) -> dict:
    rle = rle_encode(mask)
    return {"size": rle["size"], "counts": rle_counts_to_string(rle["counts"])}


def _semantic_to_json(sem: np.ndarray) -> dict:
    out = {"size": list(sem.shape), "layers": {}}
    for v in np.unique(sem):
        out["layers"][str(int(v))] = _compact_rle(sem == v)["counts"]
    return out


def _semantic_from_json(d: dict) -> np.ndarray:
    h, w = d["size"]
    sem = np.full((h, w), UNLABELED_ID, dtype=np.int64)
    for v, counts in d["layers"].items():
        sem[rle_decode({"size": [h, w], "counts": counts})] = int(v)
    return sem


def paint_instances(semantic: np.ndarray, instances: Iterable[InstanceAnnotation]) -> np.ndarray:
    """Write instance categories over ``semantic`` (instances take precedence)."""
    out = semantic.copy()
    for a in instances:
        out[a.mask] = a.category
    return out


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or "images" not in data:
        raise ParseError(f"{path}: missing 'images' section")
    return data


def load_instances(annotation_file, image_root=None) -> DatasetIndex:
    """Load a COCO instances file into a fresh index.

    Crowd annotations are skipped. Instance categories are mapped onto
    contiguous ids by sorted source id.
    """
    data = _read_json(annotation_file)
    cats = sorted(c["id"] for c in data.get("categories", []))
    if len(cats) > NUM_INSTANCE_CLASSES:
        raise IntegrityError(f"{len(cats)} instance categories exceed {NUM_INSTANCE_CLASSES}")
    inst_map = {cid: i for i, cid in enumerate(cats)}

    records: Dict[int, ImageRecord] = {}
    for img in data["images"]:
        iid = int(img["id"])
        if iid in records:
            raise IntegrityError(f"duplicate image id {iid}")
        records[iid] = ImageRecord(iid, img["file_name"], int(img["width"]), int(img["height"]))

    for ann in sorted(data.get("annotations", []), key=lambda a: (a["image_id"], a.get("id", 0))):
        rec = records.get(ann["image_id"])
        if rec is None:
            raise IntegrityError(f"annotation {ann.get('id')} references unknown image {ann['image_id']}")
        if ann.get("iscrowd", 0):
            continue
        if ann["category_id"] not in inst_map:
            raise IntegrityError(f"annotation {ann.get('id')} has unknown category {ann['category_id']}")
        box = Box.from_xywh(*ann["bbox"])
        mask = segmentation_to_mask(ann["segmentation"], rec.height, rec.width)
        if not mask.any():
            logger.warning("annotation %s rasterizes to an empty mask; skipped", ann.get("id"))
            continue
        rec.instances.append(InstanceAnnotation(LabeledBox(box, inst_map[ann["category_id"]]), mask))

    return DatasetIndex(records, {"instances": inst_map}, None if image_root is None else str(image_root))


def load_stuff_merged(stuff_file, index: DatasetIndex) -> DatasetIndex:
    """Attach merged 172-category semantic rasters to every image of ``index``."""
    data = _read_json(stuff_file)
    stuff_cats = []
    other_ids = set()
    for c in data.get("categories", []):
        if c.get("name") == "other":
            other_ids.add(c["id"])
        else:
            stuff_cats.append(c["id"])
    stuff_cats.sort()
    if len(stuff_cats) > NUM_STUFF_CLASSES:
        raise IntegrityError(f"{len(stuff_cats)} stuff categories exceed {NUM_STUFF_CLASSES}")
    stuff_map = {cid: NUM_INSTANCE_CLASSES + i for i, cid in enumerate(stuff_cats)}
    for cid in other_ids:
        stuff_map[cid] = UNLABELED_ID

    canvases = {iid: np.full((r.height, r.width), UNLABELED_ID, dtype=np.int64)
                for iid, r in index.records.items()}
    for ann in sorted(data.get("annotations", []), key=lambda a: (a["image_id"], a.get("id", 0))):
        rec = index.records.get(ann["image_id"])
        if rec is None:
            raise IntegrityError(f"stuff annotation references unknown image {ann['image_id']}")
        if ann["category_id"] not in stuff_map:
            raise IntegrityError(f"unknown stuff category {ann['category_id']}")
        mask = segmentation_to_mask(ann["segmentation"], rec.height, rec.width)
        canvases[rec.image_id][mask] = stuff_map[ann["category_id"]]

    for iid, rec in index.records.items():
        rec.semantic = paint_instances(canvases[iid], rec.instances)
    index.category_map = dict(index.category_map, stuff=stuff_map)
    return index


def normalize_caption(text: str) -> str:
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def load_captions(captions_file, index: DatasetIndex) -> DatasetIndex:
    data = _read_json(captions_file)
    by_image: Dict[int, List[Tuple[int, str]]] = {}
    for ann in data.get("annotations", []):
        if ann["image_id"] not in index.records:
            raise IntegrityError(f"caption references unknown image {ann['image_id']}")
        by_image.setdefault(ann["image_id"], []).append((ann.get("id", 0), ann["caption"]))
    for iid, rec in index.records.items():
        entries = by_image.get(iid, [])
        if not entries:
            warnings.warn(f"image {iid} has no captions; kept for vision tasks only")
            index.flags.append(f"no-captions:{iid}")
        caps = []
        for _, raw in entries[:5]:
            norm = normalize_caption(raw)
            if not norm:
                index.flags.append(f"empty-caption:{iid}")
            caps.append(norm)
        rec.captions = caps
    return index


def load_coco(instances_file, stuff_file=None, captions_file=None, image_root=None,
              max_images: Optional[int] = None) -> DatasetIndex:
    index = load_instances(instances_file, image_root)
    if stuff_file is not None:
        index = load_stuff_merged(stuff_file, index)
    if captions_file is not None:
        index = load_captions(captions_file, index)
    return index.subset(max_images)


def index_digest(index: DatasetIndex) -> str:
    return hashlib.sha256(index.to_json().encode()).hexdigest()


# -- vocabulary ----------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def to_list(self) -> List[str]:
        return list(self.id_to_token[len(RESERVED_TOKENS):])

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocab(captions, min_freq: int = 5) -> Vocabulary:
    """Word-level vocabulary ordered by frequency (desc) then lexicographically.

    ``captions`` is a :class:`DatasetIndex` or an iterable of caption strings.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if isinstance(captions, DatasetIndex):
        captions = captions.captions()
    counts = Counter(tok for c in captions for tok in normalize_caption(c).split())
    if not counts:
        raise EmptyCorpus("no caption tokens to build a vocabulary from")
    kept = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode_caption(text: str, vocab: Vocabulary, max_len: int = 32) -> List[int]:
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [vocab.token_to_id.get(t, UNK) for t in normalize_caption(text).split()]
    seq = [BOS] + ids[: max_len - 2] + [EOS]
    return seq + [PAD] * (max_len - len(seq))


def decode_caption(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == BOS:
            continue
        if i in (EOS, PAD):
            break
        words.append(vocab.id_to_token[i])
    return " ".join(words)
