import json
import shutil
from pathlib import Path

import cv2
import numpy as np
import pytest
import yaml

from mtl_vision import cli
from mtl_vision.framepipe import read_frames, sample_times
from mtl_vision.metrics import MetricReport
from mtl_vision.trainer import load_checkpoint, predict_images, restore, EvalConfig

SMALL_MODEL = {"width": 0.125, "num_protos": 4, "dec_layers": 1, "dec_heads": 2, "dec_dim": 16,
               "dec_ffn": 32, "max_caption_len": 12}


def write_config(root: Path, name="config.yaml", output_dir="run", **over):
    cfg = {
        "data": {"instances": "instances.json", "stuff": "stuff.json", "captions": "captions.json",
                 "image_root": "images", "min_freq": 1},
        "model": dict(SMALL_MODEL),
        "augment": {"target_size": 64, "scale": [0.5, 1.0]},
        "optimizer": {"total_steps": 4, "l_ie": 1e-3, "l_td": 1e-3},
        "train": {"batch_size": 4, "max_caption_len": 12, "checkpoint_every": 2},
        "eval": {"conf_threshold": 0.01},
        "output_dir": output_dir,
        "seed": 5,
    }
    for k, v in over.items():
        cfg[k] = v
    path = root / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def write_video(path: Path, seconds=10, fps=5, frame=None):
    size = (48, 32)
    vw = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, size)
    rng = np.random.default_rng(0)
    for k in range(seconds * fps):
        f = frame if frame is not None else rng.integers(0, 255, (size[1], size[0], 3), dtype=np.uint8)
        vw.write(np.ascontiguousarray(f))
    vw.release()
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["make-synthetic", str(root), "--n", "12", "--size", "64", "--seed", "1",
                     "--captions", "2"]) == 0
    cfg = write_config(root)
    assert cli.main(["train", str(cfg), "--max-images", "8"]) == 0
    return root, cfg


def test_make_synthetic_writes_config(workspace):
    root, _ = workspace
    for name in ("instances.json", "stuff.json", "captions.json", "config.yaml"):
        assert (root / name).is_file()
    assert len(list((root / "images").glob("*.png"))) == 12


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    assert (run / "checkpoint.ckpt").is_file()
    assert (run / "checkpoint-000002.ckpt").is_file()
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(ln)["step"] for ln in lines] == [0, 1, 2, 3]
    assert load_checkpoint(run / "checkpoint.ckpt").step == 4


def test_train_is_byte_reproducible_and_resumable(workspace):
    root, _ = workspace
    first = (root / "run" / "train_log.jsonl").read_bytes()
    cfg2 = write_config(root, "again.yaml", output_dir="run2")
    assert cli.main(["train", str(cfg2), "--max-images", "8"]) == 0
    assert (root / "run2" / "train_log.jsonl").read_bytes() == first
    assert (root / "run2" / "checkpoint.ckpt").read_bytes() == (root / "run" / "checkpoint.ckpt").read_bytes()

    cfg3 = write_config(root, "resume.yaml", output_dir="run3")
    (root / "run3").mkdir()
    shutil.copy(root / "run" / "train_log.jsonl", root / "run3" / "train_log.jsonl")
    assert cli.main(["train", str(cfg3), "--max-images", "8", "--resume",
                     str(root / "run" / "checkpoint-000002.ckpt")]) == 0
    assert (root / "run3" / "train_log.jsonl").read_bytes() == first


def test_eval_report(workspace, capsys):
    root, cfg = workspace
    report = root / "report.json"
    assert cli.main(["eval", str(cfg), str(root / "run" / "checkpoint.ckpt"), "--max-images", "8",
                     "--report", str(report)]) == 0
    r = MetricReport.from_json(report.read_text())
    assert r.num_images == 8
    assert MetricReport.from_json(r.to_json()) == r
    for f in MetricReport.FIELDS:
        assert 0.0 <= getattr(r, f) <= 1.0
    assert "BLEU-4" in capsys.readouterr().out


def test_predict_overlay_and_sidecar(workspace, tmp_path):
    root, _ = workspace
    rng = np.random.default_rng(0)
    image = rng.integers(0, 255, (50, 90, 3), dtype=np.uint8)
    src = tmp_path / "in.png"
    cv2.imwrite(str(src), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    out = tmp_path / "out.png"
    ckpt_path = root / "run" / "checkpoint.ckpt"
    assert cli.main(["predict", str(ckpt_path), str(src), "--out", str(out), "--conf", "0.0"]) == 0
    overlay = cv2.imread(str(out))
    assert overlay.shape == image.shape
    doc = json.loads(out.with_suffix(".json").read_text())
    assert (doc["width"], doc["height"]) == (90, 50)

    model, vocab = restore(load_checkpoint(ckpt_path), restore_rng=False)
    ecfg = EvalConfig(conf_threshold=0.0)
    pred = predict_images(model, [image], vocab, ecfg, 64, model.cfg.max_caption_len)[0]
    assert [d["box"] for d in doc["detections"]] == [[d.box.x1, d.box.y1, d.box.x2, d.box.y2]
                                                     for d in pred.detections]
    assert doc["caption"] == pred.caption
    for d in doc["detections"]:
        x1, y1, x2, y2 = d["box"]
        assert 0 <= x1 <= x2 <= 90 and 0 <= y1 <= y2 <= 50


def test_caption_video_record_counts(workspace, tmp_path, capsys):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoint.ckpt")
    video = write_video(tmp_path / "v.avi")
    assert cli.main(["caption-video", ckpt, str(video), "--interval", "1"]) == 0
    recs = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert [r["timestamp"] for r in recs] == [float(k) for k in range(10)]
    out = tmp_path / "caps.jsonl"
    assert cli.main(["caption-video", ckpt, str(video), "--interval", "2", "--out", str(out),
                     "--dump-frames", str(tmp_path / "frames")]) == 0
    assert len(out.read_text().splitlines()) == 5
    assert len(list((tmp_path / "frames").glob("*.png"))) == 5


def test_caption_video_identical_frames(workspace, tmp_path, capsys):
    root, _ = workspace
    frame = np.full((32, 48, 3), 90, np.uint8)
    frame[8:20, 10:30] = (200, 30, 30)
    video = write_video(tmp_path / "same.avi", seconds=4, frame=frame)
    assert cli.main(["caption-video", str(root / "run" / "checkpoint.ckpt"), str(video)]) == 0
    caps = {json.loads(ln)["caption"] for ln in capsys.readouterr().out.splitlines()}
    assert len(caps) == 1


def test_frame_sampling():
    assert sample_times(10.0, 1.0) == [float(k) for k in range(10)]
    assert len(sample_times(10.0, 3.0)) == 3
    assert len(sample_times(0.3, 1.0)) == 0


def test_frame_pipe_returns_requested_frames(tmp_path):
    video = write_video(tmp_path / "p.avi", seconds=3)
    stream = read_frames(video, 0.5)
    frames = list(stream.frames)
    assert len(frames) == 6 and frames[0][1].shape == (32, 48, 3)


def test_dump_augment(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "aug"
    assert cli.main(["dump-augment", str(cfg), "--out", str(out), "--count", "2", "--max-images", "8"]) == 0
    names = sorted(p.name for p in out.glob("*.png"))
    assert names == ["000_before.png", "000_strong.png", "000_weak.png",
                     "001_before.png", "001_strong.png", "001_weak.png"]
    doc = json.loads((out / "000_weak.json").read_text())
    assert doc["width"] == doc["height"] == 64


def test_exit_codes(workspace, tmp_path):
    root, cfg = workspace
    ckpt = str(root / "run" / "checkpoint.ckpt")
    assert cli.main(["train", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"data": {"instances": "x.json"}, "optimiser": {}}))
    assert cli.main(["train", str(bad)]) == 2
    bad.write_text("data: [unclosed")
    assert cli.main(["train", str(bad)]) == 2
    # data problems
    missing_data = write_config(tmp_path, data={"instances": "nowhere.json"})
    assert cli.main(["train", str(missing_data)]) == 3
    assert cli.main(["predict", ckpt, str(tmp_path / "nope.png")]) == 3
    assert cli.main(["caption-video", ckpt, str(tmp_path / "nope.avi")]) == 3
    # checkpoints
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint at all, definitely not" * 2)
    assert cli.main(["predict", str(junk), str(root / "images" / "000001.png")]) == 4
    other = write_config(root, "wider.yaml", model={**SMALL_MODEL, "num_protos": 6})
    assert cli.main(["eval", str(other), ckpt, "--max-images", "2"]) == 4
