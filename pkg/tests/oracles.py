"""Brute-force reference implementations used as independent oracles."""
import numpy as np

from rendfit.geometry import Cuboid3D, rotation_y


def _inside(c, pts):
    """Membership of (N, 3) camera-frame points in cuboid ``c``."""
    local = (pts - np.asarray(c.location)) @ rotation_y(c.yaw)  # rows: R^T (p - loc)
    h, w, l = c.dimensions
    return (np.abs(local[:, 0]) <= l / 2) & (np.abs(local[:, 1]) <= h / 2) & (np.abs(local[:, 2]) <= w / 2)


def _extent(a, b, axis):
    r = [np.hypot(c.dimensions[1], c.dimensions[2]) / 2 for c in (a, b)]
    lo = min(a.location[axis] - r[0], b.location[axis] - r[1])
    hi = max(a.location[axis] + r[0], b.location[axis] + r[1])
    return lo, hi


def grid_bev_iou(a, b, n=512):
    (x0, x1), (z0, z1) = _extent(a, b, 0), _extent(a, b, 2)
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    zs = z0 + (np.arange(n) + 0.5) * (z1 - z0) / n
    X, Z = np.meshgrid(xs, zs)
    flat = lambda y: np.column_stack([X.ravel(), np.full(X.size, y), Z.ravel()])
    ia, ib = _inside(a, flat(a.location[1])), _inside(b, flat(b.location[1]))
    union = np.sum(ia | ib)
    return np.sum(ia & ib) / union if union else 0.0


def voxel_iou_3d(a, b, n=64):
    axes = []
    for axis in (0, 2):
        lo, hi = _extent(a, b, axis)
        axes.append(lo + (np.arange(n) + 0.5) * (hi - lo) / n)
    y0 = min(a.location[1] - a.dimensions[0] / 2, b.location[1] - b.dimensions[0] / 2)
    y1 = max(a.location[1] + a.dimensions[0] / 2, b.location[1] + b.dimensions[0] / 2)
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    X, Y, Z = np.meshgrid(axes[0], ys, axes[1], indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    ia, ib = _inside(a, pts), _inside(b, pts)
    union = np.sum(ia | ib)
    return np.sum(ia & ib) / union if union else 0.0


def random_cuboid_pair(rng, overlap=True):
    """Two upright cuboids, the second usually perturbed from the first so they overlap."""
    dims = tuple(rng.uniform([1.2, 1.4, 3.0], [2.0, 2.0, 5.0]))
    a = Cuboid3D((rng.uniform(-10, 10), rng.uniform(1.0, 1.4), rng.uniform(5, 40)), dims, rng.uniform(-np.pi, np.pi))
    spread = 1.5 if overlap else 6.0
    loc = tuple(np.asarray(a.location) + rng.normal(0, [spread, 0.3, spread]))
    dims_b = tuple(np.asarray(dims) * rng.uniform(0.7, 1.3, 3))
    b = Cuboid3D(loc, dims_b, a.yaw + rng.normal(0, 0.8))
    return a, b
