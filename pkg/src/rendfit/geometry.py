"""Pinhole camera, latent-to-pose decoding and upright cuboid geometry.

Image coordinates are continuous; pixel ``(row i, col j)`` covers
``[j, j+1) x [i, i+1)``.  ``project`` returns ``(x_pixel, y_pixel)`` with x
horizontal.  The box anchors follow the pairing used by the pose
parameterization: ``u`` runs vertically (top/bottom) and ``v``
horizontally (left/right); :func:`decode_pose` therefore backprojects the
pixel at column ``v`` and row ``u``.

Object frame: +x along the length, +y down (height), +z along the width.
Yaw rotates about the camera y-axis, KITTI style.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import BehindCameraError, DegenerateDimensionsError, RotationUndefinedError

MIN_DEPTH = 0.1
LATENT_DIM = 8


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box2D:
    top: float
    left: float
    bottom: float
    right: float

    def __post_init__(self):
        if not (self.top < self.bottom and self.left < self.right):
            raise ValueError(f"invalid box {self.as_tuple()}")

    def as_tuple(self):
        return (self.top, self.left, self.bottom, self.right)

    @property
    def height(self):
        return self.bottom - self.top

    @property
    def width(self):
        return self.right - self.left

    @property
    def area(self):
        return self.height * self.width


@dataclass(frozen=True)
class DatasetStats:
    """Depth and dimension priors.  Dimensions are ordered (height, width, length)."""

    mu_z: float
    sigma_z: float
    mu_d: tuple
    sigma_d: tuple

    def __post_init__(self):
        if self.sigma_z <= 0 or min(self.sigma_d) <= 0:
            raise ValueError("standard deviations must be positive")
        if len(self.mu_d) != 3 or len(self.sigma_d) != 3:
            raise ValueError("dimension statistics must be 3-vectors")


@dataclass
class SceneParams:
    """The latent state optimized per object."""

    h_u: float = 0.0
    h_v: float = 0.0
    h_z: float = 0.0
    h_dim: np.ndarray = field(default_factory=lambda: np.zeros(3))
    h_sin: float = 0.0
    h_cos: float = 1.0
    h_sh: np.ndarray = field(default_factory=lambda: np.eye(LATENT_DIM)[0])
    h_tx: np.ndarray = field(default_factory=lambda: np.eye(LATENT_DIM)[0])

    FIELDS = ("h_u", "h_v", "h_z", "h_dim", "h_sin", "h_cos", "h_sh", "h_tx")

    def as_arrays(self):
        return {k: np.array(getattr(self, k), dtype=np.float64) for k in self.FIELDS}

    @classmethod
    def from_arrays(cls, arrays):
        kw = {}
        for k in cls.FIELDS:
            a = np.array(arrays[k], dtype=np.float64)
            kw[k] = float(a) if a.ndim == 0 else a
        return cls(**kw)

    def copy(self):
        return SceneParams.from_arrays(self.as_arrays())


@dataclass(frozen=True)
class Cuboid3D:
    location: tuple  # centroid (x, y, z) in the camera frame, meters
    dimensions: tuple  # (height, width, length), meters
    yaw: float

    def __post_init__(self):
        if min(self.dimensions) <= 0:
            raise ValueError("cuboid dimensions must be positive")


def box_anchors(box):
    """Return ``(c_u, c_v, s_u, s_v)``: box center and half extents, u vertical."""
    c_u = (box.top + box.bottom) / 2.0
    c_v = (box.left + box.right) / 2.0
    s_u = (box.bottom - box.top) / 2.0
    s_v = (box.right - box.left) / 2.0
    return c_u, c_v, s_u, s_v


def project(points, K):
    """Pinhole projection of (..., 3) camera-frame points to (..., 2) pixels."""
    pts = ad.as_value(points)
    if np.any(pts.data[..., 2] <= 0):
        raise BehindCameraError("project: point with nonpositive depth")
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    px = x / z * K.fx + K.cx
    py = y / z * K.fy + K.cy
    return ad.stack([px, py], axis=-1)


def backproject(px, py, z, K):
    """Inverse of :func:`project` for a pixel ``(px, py)`` at depth ``z``."""
    x = (ad.as_value(px) - K.cx) * z / K.fx
    y = (ad.as_value(py) - K.cy) * z / K.fy
    return ad.stack([x, y, ad.as_value(z)], axis=-1)


def yaw_of(h_sin, h_cos):
    s, c = ad.as_value(h_sin), ad.as_value(h_cos)
    if abs(float(s.data)) < 1e-9 and abs(float(c.data)) < 1e-9:
        raise RotationUndefinedError("rotation pair is (0, 0)")
    return ad.arctan2(s, c)


def decode_pose_values(p, box, K, stats):
    """Differentiable decode of ``p`` (dict of DiffValues) into location, dims, yaw.

    Returns DiffValues ``(location[3], dimensions[3], yaw)``.
    """
    c_u, c_v, s_u, s_v = box_anchors(box)
    u = c_u + s_u * ad.as_value(p["h_u"])
    v = c_v + s_v * (ad.as_value(p["h_v"]) + 0.5)
    z = stats.mu_z + ad.as_value(p["h_z"]) * stats.sigma_z
    if float(z.data) <= MIN_DEPTH:
        raise BehindCameraError(f"decoded depth {float(z.data):.3f} m is behind the camera")
    dims = np.asarray(stats.mu_d) + ad.as_value(p["h_dim"]) * np.asarray(stats.sigma_d)
    if np.any(dims.data <= 0):
        raise DegenerateDimensionsError(f"decoded dimensions {dims.data} are not positive")
    location = backproject(v, u, z, K)
    yaw = yaw_of(p["h_sin"], p["h_cos"])
    return location, dims, yaw


def decode_pose(params, box, K, stats):
    """Map latent parameters to a metric :class:`Cuboid3D`."""
    loc, dims, yaw = decode_pose_values(params.as_arrays(), box, K, stats)
    return Cuboid3D(tuple(loc.data.tolist()), tuple(dims.data.tolist()), float(yaw.data))


def rotation_y(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def object_to_camera(verts_unit, dims, yaw, location):
    """Scale unit-cube-frame vertices ((N, 3) in [-1, 1]) to a posed cuboid.

    All inputs may be DiffValues; ``dims`` is (height, width, length).
    """
    dims = ad.as_value(dims)
    half = ad.stack([dims[2], dims[0], dims[1]]) * 0.5
    scaled = ad.as_value(verts_unit) * half
    yaw = ad.as_value(yaw)
    c, s = ad.cos(yaw), ad.sin(yaw)
    x, y, z = scaled[:, 0], scaled[:, 1], scaled[:, 2]
    xr = c * x + s * z
    zr = c * z - s * x
    return ad.stack([xr, y, zr], axis=1) + location


_UNIT_CORNERS = np.array(
    [[sx, sy, sz] for sx in (1.0, -1.0) for sy in (1.0, -1.0) for sz in (1.0, -1.0)]
)


def cuboid_vertices(c):
    """Eight corners, shape (8, 3), of an upright cuboid."""
    out = object_to_camera(_UNIT_CORNERS, np.asarray(c.dimensions), c.yaw, np.asarray(c.location))
    return out.data


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(a == -np.pi, np.pi, a) if np.ndim(a) else (np.pi if a == -np.pi else float(a))


def angle_diff(a, b):
    return abs(wrap_angle(a - b))
