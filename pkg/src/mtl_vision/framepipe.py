"""Frame extraction as a separate process.

``python -m mtl_vision.framepipe VIDEO --interval S`` writes one JSON header
line to stdout, then one raw RGB frame (height * width * 3 bytes) per sampled
timestamp. Timestamps are ``k * S`` for ``k < floor(duration / S)``. Decoding
failures exit non-zero with a message on stderr and no frames.
"""
from __future__ import annotations

import argparse
import json
import math
import subprocess
import sys
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np


class FrameDecodeError(IOError):
    pass


def sample_times(duration: float, interval: float) -> List[float]:
    if interval <= 0:
        raise ValueError("interval must be positive")
    n = int(math.floor(duration / interval + 1e-9))
    return [k * interval for k in range(n)]


def _decode(path: str, interval: float, out) -> int:
    import cv2

    cap = cv2.VideoCapture(path)
    if not cap.isOpened():
        print(f"cannot open video {path}", file=sys.stderr)
        return 1
    fps = cap.get(cv2.CAP_PROP_FPS)
    count = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    w, h = int(cap.get(cv2.CAP_PROP_FRAME_WIDTH)), int(cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
    if fps <= 0 or count <= 0 or w <= 0 or h <= 0:
        print(f"{path}: no decodable stream", file=sys.stderr)
        return 1
    times = sample_times(count / fps, interval)
    wanted = {min(int(math.floor(t * fps + 1e-6)), count - 1): t for t in times}
    frames = {}
    idx = 0
    while len(frames) < len(wanted):
        ok, frame = cap.read()
        if not ok:
            break
        if idx in wanted:
            frames[idx] = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
        idx += 1
    cap.release()
    if len(frames) < len(wanted):
        print(f"{path}: stream ended after {idx} of {count} frames", file=sys.stderr)
        return 1
    header = {"width": w, "height": h, "fps": fps, "frame_count": count,
              "duration": count / fps, "timestamps": times}
    out.write((json.dumps(header) + "\n").encode())
    for i in sorted(wanted):
        out.write(np.ascontiguousarray(frames[i], dtype=np.uint8).tobytes())
    out.flush()
    return 0


@dataclass
class FrameStream:
    header: dict
    frames: Iterator[Tuple[float, np.ndarray]]


def read_frames(path, interval: float = 1.0) -> FrameStream:
    """Run the decoder subprocess and return its header plus (timestamp, frame) pairs."""
    proc = subprocess.run([sys.executable, "-m", "mtl_vision.framepipe", str(path), "--interval", str(interval)],
                          capture_output=True)
    if proc.returncode != 0:
        raise FrameDecodeError(proc.stderr.decode(errors="replace").strip() or f"cannot decode {path}")
    data = proc.stdout
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    size = header["width"] * header["height"] * 3
    body = data[nl + 1:]
    if len(body) != size * len(header["timestamps"]):
        raise FrameDecodeError(f"decoder produced {len(body)} bytes, expected {size * len(header['timestamps'])}")

    def gen():
        for k, t in enumerate(header["timestamps"]):
            raw = np.frombuffer(body, dtype=np.uint8, count=size, offset=k * size)
            yield t, raw.reshape(header["height"], header["width"], 3).copy()

    return FrameStream(header, gen())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m mtl_vision.framepipe")
    ap.add_argument("video")
    ap.add_argument("--interval", type=float, default=1.0)
    args = ap.parse_args(argv)
    if args.interval <= 0:
        print("interval must be positive", file=sys.stderr)
        return 2
    return _decode(args.video, args.interval, sys.stdout.buffer)


if __name__ == "__main__":
    sys.exit(main())
