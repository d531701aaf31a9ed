"""``mtl-vision`` command line.

Exit codes: 0 ok, 2 configuration error, 3 I/O or data error, 4 incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np
import torch
import yaml

from . import synthetic
from .augment import make_views
from .cocodata import (
    DatasetIndex,
    EmptyCorpus,
    IntegrityError,
    ParseError,
    Vocabulary,
    build_vocab,
    load_coco,
)
from .config import ConfigError, RunConfig, dump_config, load_config
from .core import Detection
from .framepipe import FrameDecodeError, read_frames
from .network import ModelConfig, MultiTaskNet
from .render import render_overlay, sidecar, write_overlay
from .trainer import (
    Checkpoint,
    ChecksumError,
    EvalConfig,
    VersionError,
    build_optimizer,
    caption_images,
    evaluate_all,
    load_checkpoint,
    predict_images,
    restore,
    save_checkpoint,
    step_rng,
    sample_batch,
    train,
)

logger = logging.getLogger("mtl_vision")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
LOG_NAME = "train_log.jsonl"
CHECKPOINT_NAME = "checkpoint.ckpt"
REPORT_NAME = "metrics.json"


class IncompatibleCheckpoint(ValueError):
    pass


# -- helpers -------------------------------------------------------------------

def load_index(cfg: RunConfig, max_images: Optional[int] = None) -> DatasetIndex:
    d = cfg.data
    if d.instances is None:
        raise ConfigError("data.instances is required")
    limit = max_images if max_images is not None else d.max_images
    if d.index_cache and Path(d.index_cache).is_file():
        index = DatasetIndex.load(d.index_cache)
    else:
        index = load_coco(d.instances, d.stuff, d.captions, d.image_root)
        if d.index_cache:
            index.save(d.index_cache)
    if d.image_root is not None:
        index.image_root = d.image_root
    index = index.subset(limit)
    if len(index) == 0:
        raise EmptyCorpus("dataset has no images")
    return index


def model_config_for(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return dataclasses.replace(cfg.model, vocab_size=vocab_size)


def open_checkpoint(path) -> Checkpoint:
    try:
        ckpt = load_checkpoint(path)
    except (ChecksumError, VersionError) as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpoint(f"{path}: malformed checkpoint ({exc})") from exc
    return ckpt


def check_architecture(ckpt: Checkpoint, cfg: RunConfig) -> None:
    stored = ckpt.model_config
    want = model_config_for(cfg, len(Vocabulary.from_list(ckpt.vocab))).to_dict()
    diff = sorted(k for k in set(stored) | set(want) if stored.get(k) != want.get(k))
    if diff:
        raise IncompatibleCheckpoint(f"checkpoint architecture differs from config in: {', '.join(diff)}")


def model_from_checkpoint(ckpt: Checkpoint):
    try:
        model, vocab = restore(ckpt, restore_rng=False)
    except (RuntimeError, TypeError) as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    return model, vocab


def eval_config_from(ckpt: Checkpoint) -> EvalConfig:
    return EvalConfig(**ckpt.extra.get("eval", {}))


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = load_index(cfg, args.max_images)
    samples = index.samples()

    log_path, ckpt_path = out / LOG_NAME, out / CHECKPOINT_NAME
    kept: List[str] = []
    if args.resume:
        ckpt = open_checkpoint(args.resume)
        check_architecture(ckpt, cfg)
        model, vocab = model_from_checkpoint(ckpt)
        optimizer = build_optimizer(model, cfg.optimizer)
        try:
            optimizer.load_state_dict(ckpt.optimizer_state)
        except (ValueError, KeyError, TypeError) as exc:
            raise IncompatibleCheckpoint(f"optimizer state: {exc}") from exc
        start = ckpt.step
        if log_path.is_file():
            kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["step"] < start]
    else:
        vocab = build_vocab(index, cfg.data.min_freq)
        torch.manual_seed(seed)
        model = MultiTaskNet(model_config_for(cfg, len(vocab)))
        optimizer = build_optimizer(model, cfg.optimizer)
        start = 0
    if start > cfg.optimizer.total_steps:
        raise IncompatibleCheckpoint(f"checkpoint step {start} beyond total_steps {cfg.optimizer.total_steps}")

    (out / "config.yaml").write_text(dump_config(cfg))
    extra = {"seed": seed, "target_size": cfg.augment.target_size, "eval": dataclasses.asdict(cfg.eval)}
    with open(log_path, "w") as log:
        log.writelines(ln + "\n" for ln in kept)
        train_cfg = cfg.train
        ckpt_every = train_cfg.checkpoint_every
        # periodic checkpoints go to step-tagged files; the final one to CHECKPOINT_NAME
        step = start
        while step < cfg.optimizer.total_steps:
            stop = cfg.optimizer.total_steps if not ckpt_every else min(
                cfg.optimizer.total_steps, (step // ckpt_every + 1) * ckpt_every)
            train(model, samples, vocab, cfg.augment, cfg.optimizer, cfg.loss_weights, train_cfg,
                  seed=seed, optimizer=optimizer, start_step=step, end_step=stop, log=log)
            step = stop
            if ckpt_every and step % ckpt_every == 0 and step < cfg.optimizer.total_steps:
                save_checkpoint(out / f"checkpoint-{step:06d}.ckpt", model, optimizer, step, vocab, extra)
    save_checkpoint(ckpt_path, model, optimizer, cfg.optimizer.total_steps, vocab, extra)
    print(f"trained steps {start}..{cfg.optimizer.total_steps} on {len(samples)} images; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = open_checkpoint(args.checkpoint)
    check_architecture(ckpt, cfg)
    model, vocab = model_from_checkpoint(ckpt)
    index = load_index(cfg, args.max_images)
    report = evaluate_all(model, index.samples(), vocab, cfg.eval, cfg.augment.target_size,
                          model.cfg.max_caption_len)
    path = Path(args.report) if args.report else Path(cfg.output_dir) / REPORT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    print(report.table())
    print(f"report: {path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = open_checkpoint(args.checkpoint)
    model, vocab = model_from_checkpoint(ckpt)
    image = read_image(args.image)
    ecfg = dataclasses.replace(eval_config_from(ckpt), conf_threshold=args.conf)
    target = args.target_size or ckpt.extra.get("target_size", 640)
    pred = predict_images(model, [image], vocab, ecfg, target, model.cfg.max_caption_len)[0]
    overlay = render_overlay(image, pred.detections, pred.masks, pred.semantic, pred.caption)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".overlay.png")
    doc = sidecar(pred.detections, image.shape[:2], pred.caption, pred.semantic, source=str(args.image))
    side = write_overlay(out, overlay, doc)
    print(pred.caption)
    print(f"overlay: {out}  sidecar: {side}")
    return EXIT_OK


def cmd_caption_video(args) -> int:
    if args.interval <= 0:
        raise ConfigError("--interval must be positive")
    ckpt = open_checkpoint(args.checkpoint)
    model, vocab = model_from_checkpoint(ckpt)
    ecfg = eval_config_from(ckpt)
    target = args.target_size or ckpt.extra.get("target_size", 640)
    stream = read_frames(args.video, args.interval)
    records = []
    dump = Path(args.dump_frames) if args.dump_frames else None
    for t, frame in stream.frames:
        caption = caption_images(model, [frame], vocab, ecfg, target, model.cfg.max_caption_len)[0]
        rec = {"timestamp": round(t, 6), "caption": caption}
        records.append(rec)
        if dump is not None:
            name = dump / f"frame_{len(records) - 1:05d}.png"
            write_overlay(name, render_overlay(frame, caption=caption),
                          sidecar([], frame.shape[:2], caption, timestamp=rec["timestamp"]))
        print(json.dumps(rec, sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return EXIT_OK


def cmd_dump_augment(args) -> int:
    cfg = load_config(args.config)
    index = load_index(cfg, args.max_images)
    samples = index.samples()
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out or Path(cfg.output_dir) / "augment")
    rng = step_rng(seed, 0)
    idx = sample_batch(len(samples), min(args.count, cfg.train.batch_size) or 1, rng)
    batch = [samples[i] for i in idx]
    views = make_views(batch, cfg.augment, rng)

    def draw(sample, name, **extra):
        dets = [Detection(a.box, 1.0, a.category) for a in sample.instances]
        masks = np.stack([a.mask for a in sample.instances]) if sample.instances else None
        img = render_overlay(sample.image, dets, masks, sample.semantic, " / ".join(sample.captions[:1]))
        write_overlay(out / name, img, sidecar(dets, sample.image.shape[:2], None, sample.semantic,
                                               captions=list(sample.captions), **extra))

    for k, (src, strong, weak) in enumerate(zip(batch, views.strong, views.weak)):
        draw(src, f"{k:03d}_before.png", image_id=src.image_id)
        draw(strong, f"{k:03d}_strong.png", provenance=views.provenance[k])
        draw(weak, f"{k:03d}_weak.png", image_id=weak.image_id)
    print(f"wrote {3 * len(batch)} overlays to {out}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    paths = synthetic.write_coco(args.out, args.n, seed=args.seed, size=args.size,
                                 max_objects=args.max_objects, captions_per_image=args.captions)
    cfg = {
        "data": {"instances": "instances.json", "stuff": "stuff.json", "captions": "captions.json",
                 "image_root": "images", "min_freq": 1},
        "model": {"num_protos": 8, "max_caption_len": 16},
        "augment": {"target_size": max(32, -(-args.size // 32) * 32)},
        "optimizer": {"total_steps": 100, "l_ie": 2e-3, "l_td": 2e-3},
        "train": {"batch_size": 8, "max_caption_len": 16},
        "output_dir": "run",
    }
    (Path(args.out) / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    print(json.dumps(paths, indent=2, sort_keys=True))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtl-vision", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("config")
    p.add_argument("--max-images", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the configured dataset")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("--max-images", type=int)
    p.add_argument("--report", help="where to write the JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="overlay + sidecar for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--target-size", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("caption-video", help="caption one frame per interval")
    p.add_argument("checkpoint")
    p.add_argument("video")
    p.add_argument("--interval", type=float, default=1.0)
    p.add_argument("--out", help="JSONL file for the records")
    p.add_argument("--dump-frames", help="directory for annotated frames")
    p.add_argument("--target-size", type=int)
    p.set_defaults(func=cmd_caption_video)

    p = sub.add_parser("dump-augment", help="before/after overlays of one augmented batch")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--max-images", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_dump_augment)

    p = sub.add_parser("make-synthetic", help="write a small synthetic COCO-format dataset and config")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-objects", type=int, default=2)
    p.add_argument("--captions", type=int, default=1)
    p.set_defaults(func=cmd_make_synthetic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleCheckpoint as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ParseError, IntegrityError, EmptyCorpus, FrameDecodeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
