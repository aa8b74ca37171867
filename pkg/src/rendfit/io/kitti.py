"""KITTI object label files.

One object per line::

    type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]

``x y z`` is the bottom-center of the box in camera coordinates (y points
down), whereas :class:`~rendfit.geometry.Cuboid3D` stores the centroid; the
conversion happens here and nowhere else.  Ground truth omits ``score``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..geometry import Box2D, Cuboid3D, wrap_angle

KITTI_TYPES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc", "DontCare")


@dataclass(frozen=True)
class CuboidLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    box: tuple  # (top, left, bottom, right)
    dimensions: tuple  # (h, w, l)
    location: tuple  # bottom-center (x, y, z)
    rotation_y: float
    score: float | None = None

    @property
    def box2d(self):
        return Box2D(*self.box)

    @property
    def height_px(self):
        return self.box[2] - self.box[0]

    def cuboid(self):
        x, y, z = self.location
        return Cuboid3D((x, y - self.dimensions[0] / 2.0, z), tuple(self.dimensions), self.rotation_y)

    @classmethod
    def from_cuboid(cls, cuboid, box, score=None, type="Car", truncated=0.0, occluded=0):
        x, y, z = cuboid.location
        alpha = float(wrap_angle(cuboid.yaw - math.atan2(x, z)))
        loc = (x, y + cuboid.dimensions[0] / 2.0, z)
        return cls(type, truncated, occluded, alpha, tuple(float(b) for b in box), tuple(cuboid.dimensions),
                   loc, float(cuboid.yaw), score)


def format_label(lab):
    t, l, b, r = lab.box
    fields = [
        lab.type,
        f"{lab.truncated:.2f}",
        str(int(lab.occluded)),
        f"{lab.alpha:.6f}",
        f"{l:.2f}", f"{t:.2f}", f"{r:.2f}", f"{b:.2f}",
        *(f"{d:.6f}" for d in lab.dimensions),
        *(f"{c:.6f}" for c in lab.location),
        f"{lab.rotation_y:.6f}",
    ]
    if lab.score is not None:
        fields.append(f"{lab.score:.6f}")
    return " ".join(fields)


def parse_label(line, path="<string>", lineno=1):
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ParseError(path, lineno, f"expected 15 or 16 fields, got {len(parts)}")
    if parts[0] not in KITTI_TYPES:
        raise ParseError(path, lineno, f"unknown object type {parts[0]!r}")
    try:
        nums = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise ParseError(path, lineno, f"non-numeric field: {exc}") from None
    if not all(np.isfinite(nums)):
        raise ParseError(path, lineno, "non-finite field")
    trunc, occ, alpha, left, top, right, bottom, h, w, l, x, y, z, ry = nums[:14]
    score = nums[14] if len(nums) == 15 else None
    return CuboidLabel(parts[0], trunc, int(occ), alpha, (top, left, bottom, right), (h, w, l), (x, y, z), ry, score)


def write_labels(labels, path):
    text = "".join(format_label(lab) + "\n" for lab in labels)
    Path(path).write_text(text)


def read_labels(path):
    path = Path(path)
    out = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            out.append(parse_label(line, path, i))
    return out
