"""Per-object render-and-compare optimization."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .errors import DivergedError, OffScreenError, RendfitError
from .generator import project_to_sphere, project_to_sphere_np
from .geometry import (
    LATENT_DIM,
    Box2D,
    Cuboid3D,
    SceneParams,
    decode_pose,
    decode_pose_values,
    object_to_camera,
    wrap_angle,
)
from .imaging import to_gray
from .losses import (
    LOSS_NAMES,
    LossWeights,
    box_iou,
    box_loss,
    confidence,
    depth_loss,
    dim_regularizer,
    pixel_loss,
    protrusion_ratio,
    silhouette_loss,
    total_loss,
)
from .raster import RasterConfig, hard_rasterize, rasterize

log = logging.getLogger(__name__)

ESCAPE_OFFSET = math.radians(15.0)
PROXY_SCALES = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 150
    lr: float = 0.03
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    escape: bool = True
    escape_stride: int = 1
    escape_size: int = 64
    init_rot_std: float = 0.1
    init_latent_std: float = 0.01
    raster: RasterConfig = RasterConfig()

    def __post_init__(self):
        if self.iterations < 0 or self.escape_stride < 1:
            raise ValueError("iterations must be >= 0 and escape_stride >= 1")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam constants")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.03
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam.  Returns a new parameter dict; ``state`` is updated in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"gradient of {name}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# ---------------------------------------------------------------------------
# initialization


def init_params(seed, box=None, stats=None, rot_std=0.1, latent_std=0.01, latent_dim=LATENT_DIM):
    """Zero location/dimension offsets; small random rotation pair and latents."""
    rng = np.random.default_rng(seed)
    h_sin, h_cos = rng.normal(0.0, rot_std, size=2)
    sh = project_to_sphere_np(rng.normal(0.0, latent_std, size=latent_dim))
    tx = project_to_sphere_np(rng.normal(0.0, latent_std, size=latent_dim))
    return SceneParams(0.0, 0.0, 0.0, np.zeros(3), float(h_sin), float(h_cos), sh, tx)


# ---------------------------------------------------------------------------
# forward model


@dataclass
class ForwardResult:
    total: ad.DiffValue
    components: dict
    buffers: object
    dims: ad.DiffValue
    verts_unit: np.ndarray
    texture: np.ndarray
    both_empty: bool


def object_forward(p, evidence, K, stats, generator, weights, rcfg, depth_silhouette=None):
    """Decode, render into the detection crop and score against ``evidence``.

    ``p`` maps parameter names to arrays or DiffValues.  ``depth_silhouette``
    replaces the (detached) rendered silhouette that weights the depth term;
    finite-difference checks use it to hold that factor fixed.
    """
    loc, dims, yaw = decode_pose_values(p, evidence.box, K, stats)
    sh = project_to_sphere(p["h_sh"])
    tx = project_to_sphere(p["h_tx"])
    verts_unit, texture = generator.decode_values(sh, tx)
    verts = object_to_camera(verts_unit, dims, yaw, loc)
    buf = rasterize(verts, texture, generator, K, evidence.box, rcfg)
    if buf.offscreen:
        raise OffScreenError("object projects outside its crop")
    l_m, empty = silhouette_loss(evidence.foreground, buf.silhouette)
    comps = {
        "L_p": pixel_loss(evidence.rgb, buf.rgb),
        "L_b": box_loss(box_iou(buf.box_smooth, evidence.box), weights.t_b),
        "L_m": l_m,
        "L_d": depth_loss(evidence.depth, buf.depth, evidence.foreground,
                          buf.silhouette if depth_silhouette is None else depth_silhouette),
        "L_dim": dim_regularizer(dims, stats.mu_d),
    }
    return ForwardResult(total_loss(comps, weights), comps, buf, dims, verts_unit.data, texture.data, empty)


# ---------------------------------------------------------------------------
# rotation escape


def proxy_distance(a, b, scales=PROXY_SCALES):
    """Multi-scale blurred L1 between two equal-size gray images."""
    return float(sum(np.mean(np.abs(gaussian_filter(a, s) - gaussian_filter(b, s))) for s in scales))


def evidence_appearance(evidence, size):
    gray = to_gray(evidence.rgb) * evidence.foreground
    return ad.crop_resize(gray, (0.0, 0.0) + gray.shape, (size, size)).data


def candidate_appearance(verts_unit, texture, generator, K, dims, yaw, loc, size):
    """Hard render at ``yaw``, framed by its own projected box and resized to ``size``."""
    verts = object_to_camera(verts_unit, dims, yaw, loc).data
    px = verts[:, 0] / verts[:, 2] * K.fx + K.cx
    py = verts[:, 1] / verts[:, 2] * K.fy + K.cy
    region = Box2D(py.min(), px.min(), py.max(), px.max())
    mask, _, rgb, _ = hard_rasterize(verts, texture, generator, K, region, (size, size))
    return to_gray(rgb) * mask


def escape_candidates(yaw, rng):
    return [yaw, yaw + ESCAPE_OFFSET, yaw - ESCAPE_OFFSET, -yaw, rng.uniform(-math.pi, math.pi)]


def rotation_escape(params, evidence, K, stats, generator, verts_unit, texture, rng, size=64, target=None):
    """Score the five candidate yaws; return ``(new_yaw or None, scores)``.

    The current angle is replaced only when a candidate scores strictly lower.
    """
    loc, dims, yaw = decode_pose_values(params, evidence.box, K, stats)
    yaw = float(yaw.data)
    if target is None:
        target = evidence_appearance(evidence, size)
    scores = []
    for r in escape_candidates(yaw, rng):
        try:
            img = candidate_appearance(verts_unit, texture, generator, K, dims.data, r, loc.data, size)
        except (RendfitError, ValueError) as exc:
            log.debug("escape candidate %.3f skipped: %s", r, exc)
            scores.append((r, math.inf))
            continue
        scores.append((r, proxy_distance(img, target)))
    current = scores[0][1]
    best_r, best = min(scores[1:], key=lambda rs: rs[1])
    if best < current:
        return float(wrap_angle(best_r)), scores
    return None, scores


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    params: SceneParams
    cuboid: Cuboid3D
    components: dict
    trace: list
    escapes: list
    wall_time: float
    seed: int
    c3d: float = 0.0
    protrusion: float = 0.0
    both_empty: bool = False
    box2d: Box2D | None = None

    def trace_csv(self):
        lines = ["iteration,L," + ",".join(LOSS_NAMES)]
        for row in self.trace:
            lines.append(f"{row[0]}," + ",".join(f"{x:.10e}" for x in row[1:]))
        return "\n".join(lines) + "\n"

    def to_text(self, include_time=False):
        c = self.cuboid
        out = [f"seed={self.seed}", f"iterations={len(self.trace)}"]
        out.append("location=" + " ".join(f"{x:.6f}" for x in c.location))
        out.append("dimensions=" + " ".join(f"{x:.6f}" for x in c.dimensions))
        out.append(f"yaw={c.yaw:.6f}")
        for name in LOSS_NAMES:
            out.append(f"{name}={self.components[name]:.10e}")
        out.append(f"c3d={self.c3d:.10e}")
        out.append(f"protrusion={self.protrusion:.10e}")
        for it, old, new in self.escapes:
            out.append(f"escape={it} {old:.6f} {new:.6f}")
        for k, v in self.params.as_arrays().items():
            out.append(f"{k}=" + " ".join(f"{x:.10e}" for x in np.atleast_1d(v)))
        if include_time:
            out.append(f"wall_time={self.wall_time:.3f}")
        return "\n".join(out) + "\n"


def _leaves(tape, arrays):
    return {k: tape.leaf(v, name=k) for k, v in arrays.items()}


def fit_object(evidence, K, stats, generator, weights=LossWeights(), cfg=FitConfig(), seed=0, init=None,
               callback=None):
    """Optimize one object's latent state against ``evidence``."""
    start = time.perf_counter()
    params = (init if init is not None else init_params(seed, evidence.box, stats, cfg.init_rot_std,
                                                        cfg.init_latent_std)).as_arrays()
    rng = np.random.default_rng([seed, 1])
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    trace, escapes = [], []
    target = evidence_appearance(evidence, cfg.escape_size) if cfg.escape else None
    verts_unit = texture = None
    for it in range(cfg.iterations):
        if cfg.escape and verts_unit is not None and it % cfg.escape_stride == 0:
            new_yaw, _ = rotation_escape(params, evidence, K, stats, generator, verts_unit, texture, rng,
                                         cfg.escape_size, target)
            if new_yaw is not None:
                old = float(np.arctan2(params["h_sin"], params["h_cos"]))
                params["h_sin"], params["h_cos"] = np.array(math.sin(new_yaw)), np.array(math.cos(new_yaw))
                escapes.append((it, old, new_yaw))
        tape = ad.Tape()
        leaves = _leaves(tape, params)
        try:
            res = object_forward(leaves, evidence, K, stats, generator, weights, cfg.raster)
        except DivergedError as exc:
            raise DivergedError(exc.what, it) from None
        verts_unit, texture = res.verts_unit, res.texture
        trace.append((it, float(res.total.data)) + tuple(float(res.components[n].data) for n in LOSS_NAMES))
        tape.backward(res.total)
        grads = {k: leaves[k].grad for k in params}
        try:
            params = adam_step(params, grads, state)
        except DivergedError as exc:
            raise DivergedError(exc.what, it) from None
        params["h_sh"] = project_to_sphere_np(params["h_sh"])
        params["h_tx"] = project_to_sphere_np(params["h_tx"])
        if callback is not None:
            callback(it, params, res)
    final = SceneParams.from_arrays(params)
    res = object_forward(params, evidence, K, stats, generator, weights, cfg.raster)
    comps = {n: float(res.components[n].data) for n in LOSS_NAMES}
    for n, v in comps.items():
        if not math.isfinite(v):
            raise DivergedError(n, cfg.iterations)
    box2d = res.buffers.box2d
    b = protrusion_ratio(box2d, evidence.box) if box2d is not None else 1.0
    c3d = confidence(evidence.score, comps["L_m"], b, weights.alpha_m, weights.alpha_b)
    return FitReport(
        params=final,
        cuboid=decode_pose(final, evidence.box, K, stats),
        components=comps,
        trace=trace,
        escapes=escapes,
        wall_time=time.perf_counter() - start,
        seed=seed,
        c3d=c3d,
        protrusion=b,
        both_empty=res.both_empty,
        box2d=box2d,
    )
