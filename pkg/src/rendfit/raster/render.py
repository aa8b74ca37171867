"""Differentiable crop rendering and the hard reference rasterizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import BehindCameraError
from ..geometry import MIN_DEPTH, Box2D, project
from ..imaging import write_pfm, write_ppm
from . import kernels

# outward-wound faces toward the camera have negative doubled area in
# (x right, y down) pixel coordinates
FRONT_SIGN = -1.0


@dataclass(frozen=True)
class RasterConfig:
    """Renderer settings.

    ``sigma`` is the edge softness in crop pixels.  ``depth_temperature``
    is the softmax temperature over normalized inverse depth (0 = nearest
    vertex of the mesh, 1 = farthest).  ``cutoff`` (in units of ``sigma``)
    bounds each triangle's reach; the last ``window`` units fade out smoothly.
    Triangles facing away from the camera are faded out over the first
    ``cull_area`` (crop px^2, twice the signed area) of their turn; 0 disables
    culling.  ``coverage_gain`` k raises each surface's transmittance to the
    k-th power (k = 2 matches a double-sided surface).
    """

    sigma: float = 0.25
    crop_h: int = 128
    crop_w: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    depth_temperature: float = 0.03
    tau_b: float = 0.1
    cutoff: float = 8.0
    window: float = 3.0
    cull_area: float = 1.0
    coverage_gain: float = 2.0
    coverage_floor: float = 0.05
    depth_range_pad: float = 0.01

    def __post_init__(self):
        if not (self.sigma > 0 and self.coverage_gain > 0):
            raise ValueError("sigma and coverage_gain must be positive")
        if self.crop_h < 16 or self.crop_w < 16:
            raise ValueError("crop size must be at least 16x16")
        if not (self.depth_temperature > 0 and self.tau_b > 0):
            raise ValueError("temperatures must be positive")
        if not 0 < self.window <= self.cutoff:
            raise ValueError("window must lie in (0, cutoff]")
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")


@dataclass
class RenderBuffers:
    rgb: ad.DiffValue  # (H, W, 3)
    silhouette: ad.DiffValue  # (H, W)
    depth: ad.DiffValue  # (H, W)
    box_smooth: ad.DiffValue | None  # (4,) top, left, bottom, right in image pixels
    box2d: Box2D | None  # hard bound of the projected vertices
    offscreen: bool = False
    stats: dict = field(default_factory=dict)


def _ramp(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s), 30.0 * s * s * (1.0 - s) * (1.0 - s)


def _contiguous_inputs(pos, invz, tex, faces, uv, face_tex):
    return (
        np.ascontiguousarray(pos, dtype=np.float64),
        np.ascontiguousarray(invz, dtype=np.float64),
        np.ascontiguousarray(faces, dtype=np.int64),
        np.ascontiguousarray(uv, dtype=np.float64),
        np.ascontiguousarray(face_tex, dtype=np.int64),
        np.ascontiguousarray(tex, dtype=np.float64),
    )


def _raster_fwd(pos, invz, tex, faces, uv, face_tex, cfg):
    H, W = cfg.crop_h, cfg.crop_w
    bg = np.asarray(cfg.background, dtype=np.float64)
    if len(faces) == 0 or len(invz) == 0:
        out = np.zeros((H, W, 5))
        out[..., 2:] = bg
        return out, None
    pos, invz, faces, uv, face_tex, tex = _contiguous_inputs(pos, invz, tex, faces, uv, face_tex)
    i_lo, i_hi = int(np.argmin(invz)), int(np.argmax(invz))
    lo, hi = invz[i_lo], invz[i_hi]
    rng = hi * (1.0 + cfg.depth_range_pad) - lo
    S, wsum, zsum, csum = kernels.soft_forward(
        pos, invz, faces, uv, face_tex, tex, H, W,
        cfg.sigma, cfg.depth_temperature, cfg.cutoff, cfg.window, lo, rng, FRONT_SIGN, cfg.cull_area,
    )
    S = S * cfg.coverage_gain
    covered = wsum > 0
    safe = np.where(covered, wsum, 1.0)
    ratio = np.where(covered, zsum / safe, 0.0)
    col = np.where(covered[..., None], csum / safe[..., None], 0.0)
    psi, dpsi = _ramp(S / cfg.coverage_floor)
    trans = np.exp(-S)
    sil = 1.0 - trans
    out = np.empty((H, W, 5))
    out[..., 0] = sil
    out[..., 1] = psi * ratio
    out[..., 2:] = sil[..., None] * col + trans[..., None] * bg
    ctx = dict(wsum=wsum, ratio=ratio, col=col, psi=psi, dpsi=dpsi / cfg.coverage_floor,
               trans=trans, lo=lo, rng=rng, i_lo=i_lo, i_hi=i_hi)
    return out, ctx


def _raster_bwd(ctx, g, out, pos, invz, tex, faces, uv, face_tex, cfg):
    if ctx is None:
        return np.zeros_like(pos), np.zeros_like(invz), np.zeros_like(tex)
    bg = np.asarray(cfg.background, dtype=np.float64)
    sil = out[..., 0]
    g_sil, g_depth, g_rgb = g[..., 0], g[..., 1], g[..., 2:]
    g_col = np.ascontiguousarray(sil[..., None] * g_rgb)
    g_sil_total = g_sil + np.sum(g_rgb * (ctx["col"] - bg), axis=-1)
    g_ratio = np.ascontiguousarray(g_depth * ctx["psi"])
    g_S = np.ascontiguousarray((g_sil_total * ctx["trans"] + g_depth * ctx["ratio"] * ctx["dpsi"]) * cfg.coverage_gain)
    pos, invz, faces, uv, face_tex, tex = _contiguous_inputs(pos, invz, tex, faces, uv, face_tex)
    gpos, ginvz, gtex, glo, ghi = kernels.soft_backward(
        pos, invz, faces, uv, face_tex, tex, cfg.crop_h, cfg.crop_w,
        cfg.sigma, cfg.depth_temperature, cfg.cutoff, cfg.window, ctx["lo"], ctx["rng"], cfg.depth_range_pad,
        FRONT_SIGN, cfg.cull_area,
        ctx["wsum"], ctx["ratio"], ctx["col"], g_S, g_ratio, g_col,
    )
    ginvz[ctx["i_lo"]] += glo
    ginvz[ctx["i_hi"]] += ghi
    return gpos, ginvz, gtex


ad.register_op("raster", _raster_fwd, _raster_bwd, arity=3, returns_ctx=True)


def raster_op(pos, invz, texture, topology, cfg):
    """Packed (H, W, 5) buffer: silhouette, depth, rgb.  Inputs are crop-pixel positions."""
    return ad.record(
        "raster", [pos, invz, texture],
        faces=topology.faces, uv=topology.uv, face_tex=topology.face_tex, cfg=cfg,
    )


def rendered_box(verts_cam, K, tau_b=0.1):
    """Smooth (log-sum-exp) and hard image-space bounds of the projected vertices.

    Returns ``(smooth, hard)``: a (4,) DiffValue (top, left, bottom, right)
    and a :class:`Box2D`.
    """
    pix = project(verts_cam, K)
    px, py = pix[:, 0], pix[:, 1]
    smooth = ad.stack([
        ad.smooth_min(py, temperature=tau_b),
        ad.smooth_min(px, temperature=tau_b),
        ad.smooth_max(py, temperature=tau_b),
        ad.smooth_max(px, temperature=tau_b),
    ])
    d = pix.data
    hard = (d[:, 1].min(), d[:, 0].min(), d[:, 1].max(), d[:, 0].max())
    try:
        hard_box = Box2D(*hard)
    except ValueError:
        hard_box = None
    return smooth, hard_box


def to_crop(pix, crop, cfg):
    """Map full-image pixel coordinates to crop-pixel coordinates."""
    sx = cfg.crop_w / (crop.right - crop.left)
    sy = cfg.crop_h / (crop.bottom - crop.top)
    return ad.stack([(pix[:, 0] - crop.left) * sx, (pix[:, 1] - crop.top) * sy], axis=1)


def _check_depth(verts):
    zmin = float(verts.data[:, 2].min()) if verts.data.size else np.inf
    if zmin <= MIN_DEPTH:
        raise BehindCameraError(f"vertex at z = {zmin:.3f} m is not in front of the camera")


def _empty_buffers(verts, cfg, with_box, K):
    H, W = cfg.crop_h, cfg.crop_w
    rgb = np.zeros((H, W, 3)) + np.asarray(cfg.background, dtype=np.float64)
    box_smooth, box2d = (rendered_box(verts, K, cfg.tau_b) if with_box else (None, None))
    return RenderBuffers(ad.as_value(rgb), ad.as_value(np.zeros((H, W))), ad.as_value(np.zeros((H, W))),
                         box_smooth, box2d, offscreen=True)


def rasterize(verts_cam, texture, topology, K, crop, cfg=RasterConfig()):
    """Render a camera-frame mesh into the crop ``crop`` (full-image Box2D).

    ``verts_cam`` (V, 3) and ``texture`` may be DiffValues; ``topology``
    supplies ``faces``, ``uv`` and ``face_tex``.
    """
    verts = ad.as_value(verts_cam)
    if verts.data.shape[0] == 0 or len(topology.faces) == 0:
        return _empty_buffers(verts, cfg, False, K)
    _check_depth(verts)
    pix = project(verts, K)
    pos = to_crop(pix, crop, cfg)
    reach = cfg.cutoff * cfg.sigma
    p = pos.data
    if (p[:, 0].max() < -reach or p[:, 0].min() > cfg.crop_w + reach
            or p[:, 1].max() < -reach or p[:, 1].min() > cfg.crop_h + reach):
        return _empty_buffers(verts, cfg, True, K)
    invz = 1.0 / verts[:, 2]
    packed = raster_op(pos, invz, texture, topology, cfg)
    box_smooth, box2d = rendered_box(verts, K, cfg.tau_b)
    return RenderBuffers(
        rgb=packed[:, :, 2:5],
        silhouette=packed[:, :, 0],
        depth=packed[:, :, 1],
        box_smooth=box_smooth,
        box2d=box2d,
    )


def hard_rasterize(verts_cam, texture, topology, K, region=None, size=None):
    """Binary z-buffered render of ``region`` (default: whole image) at ``size`` (H, W).

    Returns ``(mask, depth, rgb, face_index)`` as numpy arrays.
    """
    verts = np.asarray(getattr(verts_cam, "data", verts_cam), dtype=np.float64)
    tex = np.asarray(getattr(texture, "data", texture), dtype=np.float64)
    if region is None:
        region = Box2D(0.0, 0.0, float(K.height), float(K.width))
    if size is None:
        size = (int(round(region.height)), int(round(region.width)))
    H, W = size
    if verts.shape[0] == 0 or len(topology.faces) == 0:
        return np.zeros((H, W), bool), np.zeros((H, W)), np.zeros((H, W, 3)), -np.ones((H, W), np.int64)
    if verts[:, 2].min() <= MIN_DEPTH:
        raise BehindCameraError("hard_rasterize: vertex behind the camera")
    px = verts[:, 0] / verts[:, 2] * K.fx + K.cx
    py = verts[:, 1] / verts[:, 2] * K.fy + K.cy
    pos = np.stack([(px - region.left) * (W / region.width), (py - region.top) * (H / region.height)], axis=1)
    pos, invz, faces, uv, face_tex, tex = _contiguous_inputs(pos, 1.0 / verts[:, 2], tex, topology.faces,
                                                             topology.uv, topology.face_tex)
    return kernels.hard_raster(pos, invz, faces, uv, face_tex, tex, H, W)


def dump_buffers(buffers, prefix):
    """Write ``prefix_rgb.ppm``, ``prefix_depth.pfm`` and ``prefix_silhouette.pfm``."""
    write_ppm(f"{prefix}_rgb.ppm", buffers.rgb.data)
    write_pfm(f"{prefix}_depth.pfm", buffers.depth.data)
    write_pfm(f"{prefix}_silhouette.pfm", buffers.silhouette.data)
