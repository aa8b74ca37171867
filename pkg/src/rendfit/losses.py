"""Scalar objectives for one object, their weighted sum and the 3D confidence."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DivergedError, ShapeError
from .geometry import Box2D

LOSS_NAMES = ("L_p", "L_b", "L_m", "L_d", "L_dim")
BOTH_EMPTY_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    lambda_b: float = 1.0
    lambda_m: float = 1.0
    lambda_d: float = 0.2
    lambda_dim: float = 0.1
    t_b: float = 0.1
    alpha_m: float = 0.1
    alpha_b: float = 0.03

    def __post_init__(self):
        for name in ("lambda_p", "lambda_b", "lambda_m", "lambda_d", "lambda_dim", "alpha_m", "alpha_b"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.t_b < 1.0:
            raise ValueError("t_b must lie in [0, 1)")

    def weight_of(self, component):
        return {"L_p": self.lambda_p, "L_b": self.lambda_b, "L_m": self.lambda_m,
                "L_d": self.lambda_d, "L_dim": self.lambda_dim}[component]

    def without(self, *components):
        """Copy with the named components' weights set to zero."""
        kw = dict(self.__dict__)
        for c in components:
            kw["lambda_" + c.split("_", 1)[1]] = 0.0
        return LossWeights(**kw)


@dataclass
class ObjectEvidence:
    """Per-object observation, resampled into the detection box crop."""

    rgb: np.ndarray  # (H, W, 3), background zeroed
    foreground: np.ndarray  # (H, W) in {0, 1}
    depth: np.ndarray  # (H, W) meters
    box: Box2D
    score: float
    label: str = "Car"

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.foreground = np.asarray(self.foreground, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        h, w = self.foreground.shape
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise ShapeError(f"evidence crops disagree: rgb {self.rgb.shape}, mask {(h, w)}, depth {self.depth.shape}")
        if not np.all((self.foreground == 0) | (self.foreground == 1)):
            raise ValueError("foreground crop must be binary")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must lie in [0, 1]")

    @property
    def crop_size(self):
        return self.foreground.shape


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def pixel_loss(image, rendered):
    """Per-pixel L1 summed over channels, averaged over pixels."""
    image, rendered = ad.as_value(image), ad.as_value(rendered)
    _same_shape("pixel_loss", image, rendered)
    h, w = image.shape[:2]
    return ad.absolute(image - rendered).sum() / (h * w)


def box_iou(pred, box):
    """IoU of a differentiable (top, left, bottom, right) vector with a fixed :class:`Box2D`."""
    pred = ad.as_value(pred)
    t, l, b, r = pred[0], pred[1], pred[2], pred[3]
    ih = ad.relu(ad.minimum(b, box.bottom) - ad.maximum(t, box.top))
    iw = ad.relu(ad.minimum(r, box.right) - ad.maximum(l, box.left))
    inter = ih * iw
    union = (b - t) * (r - l) + box.area - inter
    return inter / union


def box_loss(iou, t_b=0.1):
    return ad.relu(1.0 - ad.as_value(iou) - t_b)


def silhouette_loss(mask, silhouette):
    """``1 - soft IoU``.  Returns ``(loss, both_empty)``; both empty gives loss 1."""
    mask, silhouette = ad.as_value(mask), ad.as_value(silhouette)
    _same_shape("silhouette_loss", mask, silhouette)
    prod = mask * silhouette
    union = (mask + silhouette - prod).sum()
    if float(union.data) < BOTH_EMPTY_EPS:
        return ad.DiffValue(1.0), True
    return 1.0 - prod.sum() / union, False


def depth_loss(depth, rendered_depth, mask, silhouette):
    """Masked L1 depth error; the rendered silhouette enters as a constant weight."""
    depth, rendered_depth = ad.as_value(depth), ad.as_value(rendered_depth)
    _same_shape("depth_loss", depth, rendered_depth)
    weight = np.asarray(getattr(mask, "data", mask)) * ad.detach(silhouette).data
    if weight.shape != depth.shape:
        raise ShapeError(f"depth_loss: weight shape {weight.shape} does not match depth {depth.shape}")
    h, w = depth.shape
    return (ad.absolute(depth - rendered_depth) * weight).sum() / (h * w)


def dim_regularizer(dimensions, mu_d):
    return ad.absolute(ad.as_value(dimensions) - np.asarray(mu_d, dtype=np.float64)).sum()


def total_loss(components, weights):
    """Weighted sum over :data:`LOSS_NAMES`; a non-finite component raises."""
    total = None
    for name in LOSS_NAMES:
        value = ad.as_value(components[name])
        if not np.all(np.isfinite(value.data)):
            raise DivergedError(name)
        term = value * weights.weight_of(name)
        total = term if total is None else total + term
    return total


def protrusion_ratio(rendered, detection):
    """Fraction of the rendered box's area outside the detection box."""
    if rendered.area <= 0:
        return 1.0
    ih = max(0.0, min(rendered.bottom, detection.bottom) - max(rendered.top, detection.top))
    iw = max(0.0, min(rendered.right, detection.right) - max(rendered.left, detection.left))
    return 1.0 - (ih * iw) / rendered.area


def confidence(c2d, l_m, b, alpha_m=0.1, alpha_b=0.03):
    return c2d * math.exp(-alpha_m * l_m) * math.exp(-alpha_b * b)
