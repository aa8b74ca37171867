"""Frame ingestion, detection filtering, evidence crops and per-frame fitting.

Input directory layout (``<id>`` is the frame id)::

    image_2/<id>.ppm              RGB image
    depth/<id>.pfm                metric depth, full frame
    calib/<id>.txt                line "P2: <12 numbers>" (3x4 projection, row-major)
    detections/<id>.txt           instance-segmentation detections
    detections_panoptic/<id>.txt  panoptic-derived detections (mask_mode = panoptic)

Outputs go to ``label_2/<id>.txt`` (sorted by descending 3D confidence),
``traces/<id>_<k>.csv`` and ``reports/<id>_<k>.txt``.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..errors import ParseError, RendfitError
from ..fitter import fit_object
from ..generator import make_generator
from ..geometry import CameraIntrinsics
from ..imaging import nearest_resize, read_pfm, read_ppm
from ..losses import ObjectEvidence
from .detections import read_detections
from .kitti import CuboidLabel, write_labels

log = logging.getLogger(__name__)

MASK_DIRS = {"instance": "detections", "panoptic": "detections_panoptic"}


@dataclass
class FrameInput:
    frame_id: str
    image: np.ndarray  # (H, W, 3)
    detections: list
    depth: np.ndarray  # (H, W)
    K: CameraIntrinsics

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.depth.shape != (h, w):
            raise ValueError(f"depth map {self.depth.shape} does not match image {(h, w)}")
        for d in self.detections:
            if d.mask.shape != (h, w):
                raise ValueError(f"mask {d.mask.shape} does not match image {(h, w)}")


@dataclass
class FrameResult:
    frame_id: str
    labels: list
    reports: list = field(default_factory=list)
    rejections: list = field(default_factory=list)
    failures: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# files


def format_calib(K):
    p = [K.fx, 0.0, K.cx, 0.0, 0.0, K.fy, K.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    return "P2: " + " ".join(f"{v:.12e}" for v in p) + "\n"


def read_calib(path, width, height):
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.startswith("P2:"):
            vals = line[3:].split()
            if len(vals) != 12:
                raise ParseError(path, i, f"P2 needs 12 numbers, got {len(vals)}")
            try:
                p = [float(v) for v in vals]
            except ValueError as exc:
                raise ParseError(path, i, f"non-numeric P2 entry: {exc}") from None
            return CameraIntrinsics(p[0], p[5], p[2], p[6], width, height)
    raise ParseError(path, None, "no P2 line")


def list_frames(root):
    return sorted(p.stem for p in (Path(root) / "image_2").glob("*.ppm"))


def load_frame(root, frame_id, mask_mode="instance"):
    root = Path(root)
    image = read_ppm(root / "image_2" / f"{frame_id}.ppm")
    h, w = image.shape[:2]
    depth = read_pfm(root / "depth" / f"{frame_id}.pfm")
    K = read_calib(root / "calib" / f"{frame_id}.txt", w, h)
    shape, dets = read_detections(root / MASK_DIRS[mask_mode] / f"{frame_id}.txt")
    if shape != (h, w):
        raise ParseError(root / MASK_DIRS[mask_mode] / f"{frame_id}.txt", 1,
                         f"size {shape} does not match image {(h, w)}")
    return FrameInput(frame_id, image, dets, depth, K)


# ---------------------------------------------------------------------------
# filtering and evidence


def filter_detections(dets, image_size, score_threshold=0.1, min_height=20.0, margin=2.0, klass=None):
    """Return ``(kept, rejections)``; rejections are ``(index, reason)`` pairs.

    Reasons: ``class``, ``low-confidence``, ``min-height``, ``boundary``,
    checked in that order.
    """
    h, w = image_size
    kept, rejected = [], []
    for i, d in enumerate(dets):
        b = d.box
        if klass is not None and d.klass != klass:
            reason = "class"
        elif d.score < score_threshold:
            reason = "low-confidence"
        elif b.height < min_height:
            reason = "min-height"
        elif b.top < margin or b.left < margin or b.bottom > h - margin or b.right > w - margin:
            reason = "boundary"
        else:
            kept.append(d)
            continue
        rejected.append((i, reason))
        log.info("detection %d rejected: %s", i, reason)
    return kept, rejected


def foreground_map(masks, shape=None):
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        if shape is None:
            raise ValueError("foreground_map needs a shape when there are no masks")
        return np.zeros(shape, dtype=bool)
    out = np.zeros_like(masks[0])
    for m in masks:
        if m.shape != out.shape:
            raise ValueError("masks differ in size")
        out |= m
    return out


def build_evidence(det, frame, crop_size=(128, 128), foreground=None):
    """Crop and resize one detection's evidence.

    RGB is masked by the frame's foreground union before resampling; the
    silhouette target is the detection's own mask.
    """
    box = det.box
    h, w = frame.image.shape[:2]
    if box.bottom <= 0 or box.right <= 0 or box.top >= h or box.left >= w:
        raise RendfitError(f"detection box {box.as_tuple()} lies outside the {h}x{w} image")
    if foreground is None:
        foreground = foreground_map([d.mask for d in frame.detections], (h, w))
    bt = box.as_tuple()
    rgb = ad.crop_resize(frame.image * foreground[..., None], bt, crop_size).data
    depth = ad.crop_resize(frame.depth, bt, crop_size).data
    mask = nearest_resize(det.mask, bt, crop_size).astype(np.float64)
    return ObjectEvidence(rgb, mask, depth, box, det.score, det.klass)


# ---------------------------------------------------------------------------
# fitting


def frame_seed(global_seed, frame_id):
    return (int(global_seed) ^ zlib.crc32(str(frame_id).encode("utf-8"))) & 0x7FFFFFFF


def run_frame(frame, cfg, generator=None):
    """Fit every kept detection; labels come back sorted by descending confidence."""
    generator = generator if generator is not None else make_generator(cfg.generator, cfg.decoder_seed)
    size = frame.image.shape[:2]
    kept, rejected = filter_detections(frame.detections, size, cfg.score_threshold, cfg.min_height,
                                       cfg.boundary_margin, cfg.object_class)
    fg = foreground_map([d.mask for d in frame.detections], size)
    base = frame_seed(cfg.seed, frame.frame_id)
    stats, weights, fcfg = cfg.stats(), cfg.loss_weights(), cfg.fit_config()
    result = FrameResult(frame.frame_id, [], rejections=rejected)
    crop = (cfg.crop_h, cfg.crop_w)
    for k, det in enumerate(kept):
        try:
            ev = build_evidence(det, frame, crop, fg)
            rep = fit_object(ev, frame.K, stats, generator, weights, fcfg, seed=base + k)
        except (RendfitError, ValueError) as exc:
            log.warning("frame %s detection %d failed: %s", frame.frame_id, k, exc)
            result.failures.append((k, str(exc)))
            continue
        result.reports.append((k, rep))
        result.labels.append(CuboidLabel.from_cuboid(rep.cuboid, det.box.as_tuple(), score=rep.c3d, type=det.klass))
    order = sorted(range(len(result.labels)), key=lambda i: -result.labels[i].score)
    result.labels = [result.labels[i] for i in order]
    return result


def write_frame_result(result, out_dir):
    out = Path(out_dir)
    for sub in ("label_2", "traces", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_labels(result.labels, out / "label_2" / f"{result.frame_id}.txt")
    for k, rep in result.reports:
        (out / "traces" / f"{result.frame_id}_{k}.csv").write_text(rep.trace_csv())
        (out / "reports" / f"{result.frame_id}_{k}.txt").write_text(rep.to_text())


def _run_one(args):
    root, fid, cfg, out_dir = args
    frame = load_frame(root, fid, cfg.mask_mode)
    res = run_frame(frame, cfg)
    if out_dir is not None:
        write_frame_result(res, out_dir)
    return res


def run_directory(root, out_dir, cfg, frames=None):
    """Process every frame under ``root``; frames run in a process pool when ``cfg.workers > 1``."""
    frames = list_frames(root) if frames is None else list(frames)
    jobs = [(root, fid, cfg, out_dir) for fid in frames]
    if cfg.workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]
