"""Per-frame detection files: boxes, scores and run-length-encoded masks.

Format (one file per frame)::

    # free-form comments
    size <height> <width>
    det <class> <score> <top> <left> <bottom> <right> <n_runs> <run> <run> ...

Runs alternate background/foreground over the row-major flattened mask,
starting with background (a leading 0 run is written when the first pixel
is foreground).  Runs must sum to ``height * width``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..geometry import Box2D


@dataclass
class Detection:
    box: Box2D
    score: float
    mask: np.ndarray  # (H, W) bool
    klass: str = "Car"


def rle_encode(mask):
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs, shape):
    total = int(np.prod(shape))
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != total:
        raise ValueError(f"runs cover {sum(runs)} pixels, mask has {total}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(shape)


def format_detections(dets, shape):
    lines = [f"size {shape[0]} {shape[1]}"]
    for d in dets:
        runs = rle_encode(d.mask)
        b = d.box
        lines.append(
            f"det {d.klass} {d.score:.6f} {b.top:.3f} {b.left:.3f} {b.bottom:.3f} {b.right:.3f} {len(runs)} "
            + " ".join(str(r) for r in runs)
        )
    return "\n".join(lines) + "\n"


def write_detections(path, dets, shape):
    Path(path).write_text(format_detections(dets, shape))


def parse_detections(text, path="<string>"):
    """Return ``(shape, detections)``."""
    shape = None
    dets = []
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "size":
            if shape is not None or len(parts) != 3:
                raise ParseError(path, i, "malformed or repeated size line")
            try:
                shape = (int(parts[1]), int(parts[2]))
            except ValueError:
                raise ParseError(path, i, "size must be two integers") from None
            continue
        if parts[0] != "det":
            raise ParseError(path, i, f"unknown record {parts[0]!r}")
        if shape is None:
            raise ParseError(path, i, "detection before size line")
        if len(parts) < 8:
            raise ParseError(path, i, "truncated detection record")
        try:
            score = float(parts[2])
            top, left, bottom, right = (float(x) for x in parts[3:7])
            n = int(parts[7])
            runs = [int(x) for x in parts[8:]]
        except ValueError as exc:
            raise ParseError(path, i, f"non-numeric field: {exc}") from None
        if len(runs) != n:
            raise ParseError(path, i, f"expected {n} runs, found {len(runs)}")
        if not 0.0 <= score <= 1.0:
            raise ParseError(path, i, f"score {score} outside [0, 1]")
        try:
            mask = rle_decode(runs, shape)
            box = Box2D(top, left, bottom, right)
        except ValueError as exc:
            raise ParseError(path, i, str(exc)) from None
        dets.append(Detection(box, score, mask, parts[1]))
    if shape is None:
        raise ParseError(path, None, "missing size line")
    return shape, dets


def read_detections(path):
    return parse_detections(Path(path).read_text(), str(path))
