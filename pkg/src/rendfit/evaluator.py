"""Rotated-box IoU, greedy matching and interpolated average precision."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .io.kitti import read_labels

log = logging.getLogger(__name__)

AREA_EPS = 1e-12

# KITTI convention: (min box height px, max occlusion level, max truncation)
DIFFICULTIES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.7
    metric: str = "R40"
    view: str = "3D"
    difficulty: str = "moderate"
    klass: str = "Car"
    buckets: dict = field(default_factory=lambda: dict(DIFFICULTIES))

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("IoU threshold must lie in (0, 1]")
        if self.metric not in ("R40", "R11"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.view not in ("BEV", "3D", "2D"):
            raise ValueError(f"unknown view {self.view!r}")
        if self.difficulty not in self.buckets:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")


# ---------------------------------------------------------------------------
# geometry


def bev_corners(c):
    """Footprint corners in the (x, z) ground plane, counter-clockwise."""
    h, w, l = c.dimensions
    x, _, z = c.location
    cs, sn = math.cos(c.yaw), math.sin(c.yaw)
    local = [(l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2)]
    pts = [(x + cs * a + sn * b, z - sn * a + cs * b) for a, b in local]
    return _ccw(pts)


def _signed_area(poly):
    s = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def _ccw(poly):
    return poly if _signed_area(poly) >= 0 else poly[::-1]


def polygon_area(poly):
    return abs(_signed_area(poly)) if len(poly) >= 3 else 0.0


def clip_polygon(subject, clip):
    """Intersection of ``subject`` with the convex counter-clockwise polygon ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def bev_intersection(a, b):
    pa, pb = bev_corners(a), bev_corners(b)
    if polygon_area(pa) < AREA_EPS or polygon_area(pb) < AREA_EPS:
        return 0.0, polygon_area(pa), polygon_area(pb)
    inter = polygon_area(clip_polygon(pa, pb))
    return inter, polygon_area(pa), polygon_area(pb)


def bev_iou(a, b):
    inter, aa, ab = bev_intersection(a, b)
    union = aa + ab - inter
    if union < AREA_EPS or inter < AREA_EPS:
        return 0.0
    return min(1.0, inter / union)


def iou_3d(a, b):
    inter, aa, ab = bev_intersection(a, b)
    ha, hb = a.dimensions[0], b.dimensions[0]
    ya, yb = a.location[1], b.location[1]
    overlap = max(0.0, min(ya + ha / 2, yb + hb / 2) - max(ya - ha / 2, yb - hb / 2))
    vi = inter * overlap
    union = aa * ha + ab * hb - vi
    if union < AREA_EPS or vi < AREA_EPS:
        return 0.0
    return min(1.0, vi / union)


def iou_2d(a, b):
    """IoU of two (top, left, bottom, right) boxes."""
    ih = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iw = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ih * iw
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > AREA_EPS else 0.0


def label_iou(p, g, view):
    if view == "2D":
        return iou_2d(p.box, g.box)
    if view == "BEV":
        return bev_iou(p.cuboid(), g.cuboid())
    return iou_3d(p.cuboid(), g.cuboid())


# ---------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class MatchResult:
    score: float
    tp: bool
    gt_index: int | None
    ignored: bool = False


def _gt_ignored(g, cfg):
    if g.type != cfg.klass:
        return True
    min_h, max_occ, max_trunc = cfg.buckets[cfg.difficulty]
    return g.height_px < min_h or g.occluded > max_occ or g.truncated > max_trunc


def match(predictions, ground_truths, cfg):
    """Greedy matching in descending-score order (ties keep input order).

    Returns ``(results, n_gt)`` where ``n_gt`` counts in-bucket ground truths.
    A prediction whose best match is an ignored ground truth is itself
    ignored, as is an unmatched prediction lower than the bucket's minimum
    box height.
    """
    preds = [p for p in predictions if p.type == cfg.klass]
    order = sorted(range(len(preds)), key=lambda i: -(preds[i].score if preds[i].score is not None else 0.0))
    ignored = [_gt_ignored(g, cfg) for g in ground_truths]
    claimed = [False] * len(ground_truths)
    min_h = cfg.buckets[cfg.difficulty][0]
    results = []
    for i in order:
        p = preds[i]
        score = p.score if p.score is not None else 0.0
        best, best_iou, best_ign = None, -1.0, None
        for j, g in enumerate(ground_truths):
            if claimed[j] or (g.type == "DontCare" and cfg.view != "2D"):
                continue
            iou = label_iou(p, g, cfg.view)
            if iou < cfg.threshold:
                continue
            # prefer in-bucket truths, then higher IoU
            key = (not ignored[j], iou)
            if best is None or key > (not best_ign, best_iou):
                best, best_iou, best_ign = j, iou, ignored[j]
        if best is None:
            results.append(MatchResult(score, False, None, ignored=p.height_px < min_h))
        else:
            claimed[best] = True
            results.append(MatchResult(score, not best_ign, best, ignored=best_ign))
    return results, sum(1 for x in ignored if not x)


# ---------------------------------------------------------------------------
# average precision


def recall_points(metric):
    if metric == "R40":
        return [(k, 40) for k in range(1, 41)]
    return [(k, 10) for k in range(0, 11)]


def average_precision(results, n_gt, metric="R40"):
    """Interpolated AP over all frames' match results; ``None`` when ``n_gt == 0``."""
    if n_gt == 0:
        return None
    kept = [r for r in results if not r.ignored]
    order = sorted(range(len(kept)), key=lambda i: -kept[i].score)
    tp = fp = 0
    curve = []  # (tp count, precision) after each prediction
    for i in order:
        if kept[i].tp:
            tp += 1
        else:
            fp += 1
        curve.append((tp, tp / (tp + fp)))
    total = 0.0
    points = recall_points(metric)
    for k, denom in points:
        # recall >= k/denom  <=>  tp * denom >= k * n_gt (integer arithmetic)
        best = 0.0
        for tps, prec in curve:
            if tps * denom >= k * n_gt and prec > best:
                best = prec
        total += best
    return total / len(points)


# ---------------------------------------------------------------------------
# directory-level evaluation


def evaluate_frames(pred_frames, gt_frames, cfg):
    results, n_gt = [], 0
    for preds, gts in zip(pred_frames, gt_frames):
        r, n = match(preds, gts, cfg)
        results.extend(r)
        n_gt += n
    return average_precision(results, n_gt, cfg.metric), n_gt, sum(1 for r in results if not r.ignored)


def load_dirs(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(p.name for p in gt_dir.glob("*.txt"))
    preds, gts, missing = [], [], []
    for name in names:
        gts.append(read_labels(gt_dir / name))
        pp = pred_dir / name
        if pp.exists():
            preds.append(read_labels(pp))
        else:
            missing.append(name)
            preds.append([])
    for name in missing:
        log.warning("missing prediction file %s; treated as empty", name)
    return preds, gts, missing


def eval_run(pred_dir, gt_dir, views=("BEV", "3D"), thresholds=(0.7, 0.5, 0.3), metric="R40"):
    """AP per (view, threshold, difficulty).  Returns ``(rows, missing)``."""
    preds, gts, missing = load_dirs(pred_dir, gt_dir)
    rows = []
    for view in views:
        for thr in thresholds:
            for diff in DIFFICULTIES:
                cfg = EvalConfig(threshold=thr, metric=metric, view=view, difficulty=diff)
                ap, n_gt, n_pred = evaluate_frames(preds, gts, cfg)
                rows.append(dict(view=view, threshold=thr, difficulty=diff, AP=ap, num_gt=n_gt, num_pred=n_pred))
    return rows, missing


def _fmt_ap(ap):
    return "n/a" if ap is None else f"{100.0 * ap:.2f}"


def format_table(rows, metric="R40"):
    """Aligned text table: one line per (view, threshold), columns easy/moderate/hard."""
    keyed = {}
    for r in rows:
        keyed.setdefault((r["view"], r["threshold"]), {})[r["difficulty"]] = r["AP"]
    lines = [f"{'view':<5} {'IoU':>4}  {'easy':>7} {'moderate':>9} {'hard':>7}   (AP_{metric}, %)"]
    for (view, thr), d in keyed.items():
        lines.append(f"{view:<5} {thr:>4.1f}  {_fmt_ap(d.get('easy')):>7} {_fmt_ap(d.get('moderate')):>9} "
                     f"{_fmt_ap(d.get('hard')):>7}")
    return "\n".join(lines) + "\n"


def format_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["view", "threshold", "difficulty", "AP", "num_gt", "num_pred"])
    for r in rows:
        ap = "n/a" if r["AP"] is None else f"{r['AP']:.6f}"
        w.writerow([r["view"], f"{r['threshold']:.2f}", r["difficulty"], ap, r["num_gt"], r["num_pred"]])
    return buf.getvalue()
