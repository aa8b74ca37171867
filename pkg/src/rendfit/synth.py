"""Synthetic scenes with known 3D truth, rendered by the hard rasterizer."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .generator import sample_sphere
from .geometry import Box2D, CameraIntrinsics, Cuboid3D, DatasetStats, object_to_camera, project
from .losses import ObjectEvidence
from .raster import hard_rasterize

KITTI_CAMERA = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)
CAMERA_HEIGHT = 1.65
Z_RANGE = (8.0, 25.0)
# depth prior: uniform over Z_RANGE; dimensions (h, w, l) of a typical car
SYNTH_STATS = DatasetStats(
    mu_z=0.5 * (Z_RANGE[0] + Z_RANGE[1]),
    sigma_z=(Z_RANGE[1] - Z_RANGE[0]) / math.sqrt(12.0),
    mu_d=(1.53, 1.63, 3.88),
    sigma_d=(0.14, 0.10, 0.43),
)


@dataclass
class SyntheticObject:
    truth: Cuboid3D
    sh: np.ndarray
    tx: np.ndarray
    box: Box2D


@dataclass
class SyntheticScene:
    seed: int
    obj: SyntheticObject
    evidence: ObjectEvidence

    @property
    def truth(self):
        return self.obj.truth


def sample_object(rng, K=KITTI_CAMERA, stats=SYNTH_STATS, z_range=Z_RANGE, margin=10.0, max_tries=100):
    """Random on-sphere latents and an upright pose whose projection stays inside the image."""
    sh = sample_sphere(rng, 1)[0]
    tx = sample_sphere(rng, 1)[0]
    yaw = float(rng.uniform(-math.pi, math.pi))
    dims = tuple(float(m + rng.uniform(-1.0, 1.0) * s) for m, s in zip(stats.mu_d, stats.sigma_d))
    z = float(rng.uniform(*z_range))
    y = CAMERA_HEIGHT - dims[0] / 2.0
    for _ in range(max_tries):
        px = rng.uniform(0.2 * K.width, 0.8 * K.width)
        x = (px - K.cx) * z / K.fx
        cub = Cuboid3D((x, y, z), dims, yaw)
        box = projected_box(cub, K)
        if box.left > margin and box.top > margin and box.right < K.width - margin and box.bottom < K.height - margin:
            return cub, sh, tx, box
    raise RuntimeError("could not place an object inside the image")


def posed_vertices(generator, sh, tx, cuboid):
    verts_unit, texture = generator.decode_values(sh, tx)
    verts = object_to_camera(verts_unit.data, np.asarray(cuboid.dimensions), cuboid.yaw, np.asarray(cuboid.location))
    return verts.data, texture.data


def projected_box(cuboid, K, generator=None, sh=None, tx=None):
    """Tight image box of the cuboid corners, or of the mesh when a generator is given."""
    if generator is None:
        from .geometry import cuboid_vertices

        pts = cuboid_vertices(cuboid)
    else:
        pts, _ = posed_vertices(generator, sh, tx, cuboid)
    pix = project(pts, K).data
    return Box2D(pix[:, 1].min(), pix[:, 0].min(), pix[:, 1].max(), pix[:, 0].max())


def render_evidence(generator, sh, tx, cuboid, K, box, crop=(128, 128), score=1.0):
    """Ground-truth RGB/mask/depth crops of one object inside ``box``."""
    verts, texture = posed_vertices(generator, sh, tx, cuboid)
    mask, depth, rgb, _ = hard_rasterize(verts, texture, generator, K, box, crop)
    m = mask.astype(np.float64)
    return ObjectEvidence(rgb * m[..., None], m, depth * m, box, score)


def make_scene(seed, generator, K=KITTI_CAMERA, stats=SYNTH_STATS, crop=(128, 128), z_range=Z_RANGE):
    """One decoder-generated object at a random pose, with evidence in its tight mesh box."""
    rng = np.random.default_rng([seed, 7])
    cub, sh, tx, _ = sample_object(rng, K, stats, z_range)
    box = projected_box(cub, K, generator, sh, tx)
    ev = render_evidence(generator, sh, tx, cub, K, box, crop)
    return SyntheticScene(seed, SyntheticObject(cub, sh, tx, box), ev)


def make_suite(n, generator, base_seed=0, **kw):
    return [make_scene(base_seed + i, generator, **kw) for i in range(n)]


# ---------------------------------------------------------------------------
# full frames on disk


def _background(K):
    """Flat gray image and ground-plane depth (capped at 80 m above the horizon)."""
    rows = np.arange(K.height) + 0.5
    below = rows - K.cy
    z = np.where(below > 1e-6, K.fy * CAMERA_HEIGHT / np.maximum(below, 1e-6), 80.0)
    depth = np.repeat(np.minimum(z, 80.0)[:, None], K.width, axis=1)
    img = np.full((K.height, K.width, 3), 0.35)
    img += (rows / K.height * 0.2)[:, None, None]
    return img, depth


def _occlusion_level(visible_fraction):
    if visible_fraction >= 0.9:
        return 0
    if visible_fraction >= 0.5:
        return 1
    return 2


def render_frame(seed, generator, n_objects=2, K=KITTI_CAMERA, stats=SYNTH_STATS):
    """Composite several objects with a shared z-buffer.

    Returns ``(image, depth, detections, labels)``; detection boxes are the
    tight bounds of each object's visible pixels.
    """
    from .evaluator import bev_iou
    from .io.detections import Detection
    from .io.kitti import CuboidLabel

    rng = np.random.default_rng([seed, 11])
    image, depth = _background(K)
    zbuf = np.full(depth.shape, np.inf)
    owner = -np.ones(depth.shape, dtype=np.int64)
    objs, full_masks = [], []
    for k in range(n_objects):
        for _ in range(50):
            cub, sh, tx, _ = sample_object(rng, K, stats)
            if all(bev_iou(cub, o[0]) == 0.0 for o in objs):
                break
        else:
            raise RuntimeError("could not place non-overlapping objects")
        verts, texture = posed_vertices(generator, sh, tx, cub)
        mask, d, rgb, _ = hard_rasterize(verts, texture, generator, K)
        nearer = mask & (d < zbuf)
        zbuf[nearer] = d[nearer]
        image[nearer] = rgb[nearer]
        owner[nearer] = k
        objs.append((cub, sh, tx))
        full_masks.append(mask)
    depth = np.where(np.isfinite(zbuf), zbuf, depth)
    dets, labels = [], []
    for k, (cub, sh, tx) in enumerate(objs):
        vis = owner == k
        if not vis.any():
            continue
        rows, cols = np.nonzero(vis)
        box = Box2D(float(rows.min()), float(cols.min()), float(rows.max() + 1), float(cols.max() + 1))
        score = float(rng.uniform(0.5, 1.0))
        dets.append(Detection(box, score, vis, "Car"))
        occ = _occlusion_level(vis.sum() / max(full_masks[k].sum(), 1))
        labels.append(CuboidLabel.from_cuboid(cub, box.as_tuple(), occluded=occ))
    return image, depth, dets, labels


def write_synthetic_frames(root, n_frames, generator, seed=0, n_objects=2, K=KITTI_CAMERA, stats=SYNTH_STATS):
    """Write image/depth/calib/detections plus ground-truth labels for ``n_frames`` frames."""
    from pathlib import Path

    from .imaging import write_pfm, write_ppm
    from .io.detections import write_detections
    from .io.kitti import write_labels
    from .io.pipeline import format_calib

    root = Path(root)
    for sub in ("image_2", "depth", "calib", "detections", "detections_panoptic", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n_frames):
        fid = f"{i:06d}"
        image, depth, dets, labels = render_frame(seed * 100003 + i, generator, n_objects, K, stats)
        write_ppm(root / "image_2" / f"{fid}.ppm", image)
        write_pfm(root / "depth" / f"{fid}.pfm", depth)
        (root / "calib" / f"{fid}.txt").write_text(format_calib(K))
        write_detections(root / "detections" / f"{fid}.txt", dets, depth.shape)
        write_detections(root / "detections_panoptic" / f"{fid}.txt", dets, depth.shape)
        write_labels(labels, root / "label_2" / f"{fid}.txt")
        ids.append(fid)
    return ids
