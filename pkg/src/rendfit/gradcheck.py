"""Central finite-difference checks for every differentiable piece.

A check evaluates a scalar function of named arrays, takes its analytic
gradient from a tape and compares it with central differences at step
``h``.  Vector outputs are first contracted with fixed random weights.

The error reported per input is normwise::

    max_i |a_i - n_i| / max(|a|_inf, |n|_inf, floor)

with ``floor = 1e-6 * max(1, |f|)`` so that inputs with (numerically) zero
gradient are not judged on round-off.  Large inputs are checked on a
subset of coordinates (the largest analytic entries plus random ones) and
along one random direction through all inputs jointly.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .generator import Decoder, hypersphere_regularizer, project_to_sphere, sample_sphere
from .geometry import Box2D, CameraIntrinsics, DatasetStats, SceneParams, decode_pose_values, object_to_camera
from .losses import (
    LOSS_NAMES,
    LossWeights,
    box_iou,
    box_loss,
    depth_loss,
    dim_regularizer,
    pixel_loss,
    silhouette_loss,
    total_loss,
)
from .raster import RasterConfig, raster_op, rasterize, rendered_box

STEP = 1e-5
TOL_RASTER = 1e-3
TOL_DEFAULT = 1e-4
KINK_MARGIN = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    seed: int
    error: float
    tol: float
    coords: int
    seconds: float

    @property
    def passed(self):
        return bool(self.error < self.tol)

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.suite}/{self.name} seed={self.seed} rel_err={self.error:.2e} "
                f"tol={self.tol:.0e} coords={self.coords} ({self.seconds:.2f}s)")


def _evaluate(fn, arrays):
    return float(ad.as_value(fn({k: ad.DiffValue(v) for k, v in arrays.items()})).data)


def _shifted(arrays, key, flat_index, delta):
    out = dict(arrays)
    a = arrays[key].copy()
    a.reshape(-1)[flat_index] += delta
    out[key] = a
    return out


def check_gradient(fn, inputs, rng, h=STEP, max_coords=24):
    """Return ``(error, n_coords)`` for scalar ``fn`` over the dict ``inputs``."""
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in inputs.items()}
    out = ad.as_value(fn(leaves))
    f0 = float(out.data)
    if out.requires_grad:
        tape.backward(out)
    analytic = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v)) for k, v in inputs.items()}
    floor = 1e-6 * max(1.0, abs(f0))
    worst, count = 0.0, 0
    for key, x in inputs.items():
        a = analytic[key].reshape(-1)
        n = x.size
        if n <= max_coords:
            idx = np.arange(n)
        else:
            top = np.argsort(-np.abs(a), kind="stable")[: max_coords // 2]
            rest = rng.choice(n, size=max_coords - len(top), replace=False)
            idx = np.unique(np.concatenate([top, rest]))
        num = np.array([
            (_evaluate(fn, _shifted(inputs, key, i, h)) - _evaluate(fn, _shifted(inputs, key, i, -h))) / (2 * h)
            for i in idx
        ])
        ai = a[idx]
        scale = max(np.abs(ai).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(ai - num).max(initial=0.0) / scale))
        count += len(idx)
    # one joint random direction
    dirs = {k: rng.normal(size=v.shape) for k, v in inputs.items()}
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
    if norm > 0:
        plus = {k: inputs[k] + h * dirs[k] / norm for k in inputs}
        minus = {k: inputs[k] - h * dirs[k] / norm for k in inputs}
        num = (_evaluate(fn, plus) - _evaluate(fn, minus)) / (2 * h)
        ana = sum(float((analytic[k] * dirs[k]).sum()) for k in inputs) / norm
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        count += 1
    return worst, count


def _contract(value, weights):
    return (ad.as_value(value) * weights).sum()


# ---------------------------------------------------------------------------
# per-op samplers: each returns (inputs, fn) with inputs away from kinks


def _away_from(rng, shape, points=(0.0,), lo=-2.0, hi=2.0):
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < KINK_MARGIN * 10
        x[near] += 0.01
    return x


def _distinct(rng, shape, gap=1e-3):
    """Random values whose pairwise differences all exceed ``gap``."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * (4.0 / max(n, 1)) - 2.0 + rng.uniform(0, gap, size=n)
    return vals.reshape(shape)


def _op_samplers():
    def binary(kind, positive_b=False, tie_free=False, positive_both=False):
        def sample(rng):
            shape_a, shape_b = [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 3), (1, 3)), ((), (5,))][rng.integers(4)]
            a = rng.uniform(-2, 2, size=shape_a)
            b = rng.uniform(-2, 2, size=shape_b)
            if positive_b:
                b = np.sign(b) * (np.abs(b) + 0.5)
            if positive_both:
                a = np.abs(a) + 0.3
                b = np.abs(b) + 0.3
            if tie_free:
                a = rng.uniform(-2, 2, size=shape_b)
                b = a + rng.choice([-1.0, 1.0], size=shape_b) * rng.uniform(0.01, 1.0, size=shape_b)
            w = rng.normal(size=np.broadcast_shapes(np.shape(a), np.shape(b)))
            return {"a": a, "b": b}, lambda p: _contract(ad.record(kind, [p["a"], p["b"]]), w)

        return sample

    def unary(kind, domain=None, kinks=()):
        def sample(rng):
            shape = [(5,), (2, 3), ()][rng.integers(3)]
            if domain == "positive":
                x = rng.uniform(0.2, 3.0, size=shape)
            else:
                x = _away_from(rng, shape, kinks)
            w = rng.normal(size=shape)
            return {"x": x}, lambda p: _contract(ad.record(kind, [p["x"]]), w)

        return sample

    def pow_(rng):
        x = rng.uniform(0.3, 2.0, size=(4,))
        e = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.5]))
        w = rng.normal(size=4)
        return {"x": x}, lambda p: _contract(ad.record("pow", [p["x"]], p=e), w)

    def reduce(kind, distinct=False):
        def sample(rng):
            axis = [None, 0, 1][rng.integers(3)]
            x = _distinct(rng, (3, 4)) if distinct else rng.normal(size=(3, 4))
            out_shape = np.sum(x, axis=axis).shape
            w = rng.normal(size=out_shape)
            attrs = {"axis": axis}
            if kind == "logsumexp":
                attrs["temperature"] = float(rng.uniform(0.3, 2.0))
            return {"x": x}, lambda p: _contract(ad.record(kind, [p["x"]], **attrs), w)

        return sample

    def matmul(rng):
        sa, sb = [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((4,), (4,))][rng.integers(4)]
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=np.matmul(a, b).shape)
        return {"a": a, "b": b}, lambda p: _contract(ad.record("matmul", [p["a"], p["b"]]), w)

    def reshape(rng):
        x = rng.normal(size=(2, 6))
        w = rng.normal(size=(3, 4))
        return {"x": x}, lambda p: _contract(ad.record("reshape", [p["x"]], shape=(3, 4)), w)

    def transpose(rng):
        x = rng.normal(size=(2, 3, 4))
        axes = tuple(int(i) for i in rng.permutation(3))
        w = rng.normal(size=np.transpose(x, axes).shape)
        return {"x": x}, lambda p: _contract(ad.record("transpose", [p["x"]], axes=axes), w)

    def getitem(rng):
        x = rng.normal(size=(5, 4))
        index = [(slice(1, 4), 2), (np.array([0, 2, 2, 4]),), (Ellipsis, 1), (3,)][rng.integers(4)]
        index = index if len(index) > 1 else index[0]
        w = rng.normal(size=x[index].shape)
        return {"x": x}, lambda p: _contract(ad.record("getitem", [p["x"]], index=index), w)

    def stack(rng):
        xs = {f"x{i}": rng.normal(size=(3,)) for i in range(3)}
        axis = int(rng.integers(2))
        w = rng.normal(size=np.stack(list(xs.values()), axis=axis).shape)
        return xs, lambda p: _contract(ad.record("stack", [p[k] for k in sorted(p)], axis=axis), w)

    def concat(rng):
        xs = {"x0": rng.normal(size=(2, 3)), "x1": rng.normal(size=(4, 3))}
        w = rng.normal(size=(6, 3))
        return xs, lambda p: _contract(ad.record("concat", [p["x0"], p["x1"]], axis=0), w)

    def crop(rng):
        img = rng.uniform(size=(12, 14, 3))
        t, l = rng.uniform(0, 4, size=2)
        box = (t, l, t + rng.uniform(4, 8), l + rng.uniform(4, 9))
        out = (int(rng.integers(5, 11)), int(rng.integers(5, 11)))
        w = rng.normal(size=out + (3,))
        return {"img": img}, lambda p: _contract(ad.record("crop_resize", [p["img"]], box=box, out_size=out), w)

    def raster(rng):
        tri = _triangle_soup(rng, 6, 16)
        cfg = RasterConfig(sigma=float(rng.choice([0.5, 1.0])), crop_h=16, crop_w=16, cull_area=0.0)
        w = rng.normal(size=(16, 16, 5))
        topo = tri["topology"]
        return ({"pos": tri["pos"], "invz": tri["invz"], "tex": tri["tex"]},
                lambda p: _contract(raster_op(p["pos"], p["invz"], p["tex"], topo, cfg), w))

    return {
        "add": binary("add"),
        "sub": binary("sub"),
        "mul": binary("mul"),
        "div": binary("div", positive_b=True),
        "arctan2": binary("arctan2", positive_both=True),
        "maximum": binary("maximum", tie_free=True),
        "minimum": binary("minimum", tie_free=True),
        "neg": unary("neg"),
        "abs": unary("abs", kinks=(0.0,)),
        "exp": unary("exp"),
        "log": unary("log", domain="positive"),
        "sqrt": unary("sqrt", domain="positive"),
        "sin": unary("sin"),
        "cos": unary("cos"),
        "tanh": unary("tanh"),
        "sigmoid": unary("sigmoid"),
        "relu": unary("relu", kinks=(0.0,)),
        "pow": pow_,
        "sum": reduce("sum"),
        "mean": reduce("mean"),
        "max": reduce("max", distinct=True),
        "min": reduce("min", distinct=True),
        "logsumexp": reduce("logsumexp"),
        "matmul": matmul,
        "reshape": reshape,
        "transpose": transpose,
        "getitem": getitem,
        "stack": stack,
        "concat": concat,
        "crop_resize": crop,
        "raster": raster,
    }


OP_SAMPLERS = _op_samplers()
RASTER_OPS = {"raster"}


class _Topology:
    def __init__(self, faces, uv, face_tex):
        self.faces, self.uv, self.face_tex = faces, uv, face_tex


def _triangle_soup(rng, n, size):
    """``n`` random triangles in a ``size`` x ``size`` crop with a small texture."""
    pos = rng.uniform(0.1 * size, 0.9 * size, size=(3 * n, 2))
    faces = np.arange(3 * n).reshape(n, 3)
    uv = rng.uniform(0.05, 0.95, size=(n, 3, 2))
    face_tex = rng.integers(0, 2, size=n)
    tex = rng.uniform(0.1, 0.9, size=(2, 8, 8, 3))
    invz = 1.0 / rng.uniform(4.0, 6.0, size=3 * n)
    return {"pos": pos, "invz": invz, "tex": tex, "topology": _Topology(faces, uv, face_tex)}


# ---------------------------------------------------------------------------
# model-level fixtures

_CAMERA = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)
_STATS = DatasetStats(16.5, 17.0 / math.sqrt(12.0), (1.53, 1.63, 3.88), (0.14, 0.10, 0.43))
_DECODERS = {}


def _decoder():
    if 0 not in _DECODERS:
        _DECODERS[0] = Decoder(seed=0)
    return _DECODERS[0]


def random_params(rng):
    sh, tx = sample_sphere(rng, 2)
    yaw = rng.uniform(-math.pi, math.pi)
    return SceneParams(
        h_u=float(rng.uniform(-0.3, 0.3)),
        h_v=float(rng.uniform(-0.3, 0.3)),
        h_z=float(rng.uniform(-0.8, 0.8)),
        h_dim=rng.uniform(-1.0, 1.0, size=3),
        h_sin=math.sin(yaw),
        h_cos=math.cos(yaw),
        h_sh=sh,
        h_tx=tx,
    )


def _object_box(rng):
    top = rng.uniform(150, 200)
    left = rng.uniform(300, 800)
    h = rng.uniform(40, 90)
    return Box2D(top, left, top + h, left + h * rng.uniform(1.2, 2.5))


def _posed(p, box):
    loc, dims, yaw = decode_pose_values(p, box, _CAMERA, _STATS)
    verts_unit, texture = _decoder().decode_values(project_to_sphere(p["h_sh"]), project_to_sphere(p["h_tx"]))
    return object_to_camera(verts_unit, dims, yaw, loc), texture


def _render_case(rng, sigma, buffer):
    gen = _decoder()
    p = random_params(rng).as_arrays()
    box = _object_box(rng)
    crop = 32
    cfg = RasterConfig(sigma=sigma, crop_h=crop, crop_w=crop)
    # frame the crop on the object's own projection so every buffer is populated
    verts, _ = _posed(p, box)
    d = verts.data
    px = d[:, 0] / d[:, 2] * _CAMERA.fx + _CAMERA.cx
    py = d[:, 1] / d[:, 2] * _CAMERA.fy + _CAMERA.cy
    region = Box2D(py.min() - 2, px.min() - 2, py.max() + 2, px.max() + 2)
    shape = {"rgb": (crop, crop, 3), "silhouette": (crop, crop), "depth": (crop, crop), "box": (4,)}[buffer]
    w = rng.normal(size=shape)

    def fn(q):
        v, tex = _posed(q, region)
        if buffer == "box":
            return _contract(rendered_box(v, _CAMERA, cfg.tau_b)[0], w)
        buf = rasterize(v, tex, gen, _CAMERA, region, cfg)
        return _contract(getattr(buf, buffer), w)

    return p, fn


def _pipeline_case(rng):
    from .fitter import object_forward

    gen = _decoder()
    p = random_params(rng).as_arrays()
    truth = random_params(rng).as_arrays()
    box = _object_box(rng)
    cfg = RasterConfig(crop_h=32, crop_w=32)
    target = object_forward(truth, _evidence_stub(box, 32), _CAMERA, _STATS, gen, LossWeights(), cfg).buffers
    ev = _evidence_stub(box, 32, target)
    # the depth term's silhouette weight is detached, so the oracle holds it at its base value
    frozen = object_forward(p, ev, _CAMERA, _STATS, gen, LossWeights(), cfg).buffers.silhouette.data
    return p, lambda q: object_forward(q, ev, _CAMERA, _STATS, gen, LossWeights(), cfg, frozen).total


def _evidence_stub(box, size, buffers=None):
    from .losses import ObjectEvidence

    if buffers is None:
        z = np.zeros((size, size))
        return ObjectEvidence(np.zeros((size, size, 3)), z, z, box, 1.0)
    mask = (buffers.silhouette.data > 0.5).astype(np.float64)
    return ObjectEvidence(buffers.rgb.data * mask[..., None], mask, buffers.depth.data * mask, box, 1.0)


# ---------------------------------------------------------------------------
# suites


def op_suite(seeds=range(2), kinds=None):
    kinds = sorted(OP_SAMPLERS) if kinds is None else kinds
    for kind in kinds:
        tol = TOL_RASTER if kind in RASTER_OPS else TOL_DEFAULT
        for s in seeds:
            rng = np.random.default_rng([s, 101])
            inputs, fn = OP_SAMPLERS[kind](rng)
            yield "op", kind, s, tol, inputs, fn


def raster_suite(seeds=range(2), sigmas=(0.5, 1.0)):
    for buffer in ("rgb", "silhouette", "depth", "box"):
        for sigma in sigmas[:1] if buffer == "box" else sigmas:
            for s in seeds:
                rng = np.random.default_rng([s, 202])
                p, fn = _render_case(rng, sigma, buffer)
                yield "raster", f"{buffer}@sigma={sigma}", s, TOL_RASTER, p, fn


def geometry_suite(seeds=range(3)):
    for s in seeds:
        rng = np.random.default_rng([s, 303])
        p = random_params(rng).as_arrays()
        box = _object_box(rng)
        w = rng.normal(size=7)

        def fn(q, box=box, w=w):
            loc, dims, yaw = decode_pose_values(q, box, _CAMERA, _STATS)
            return _contract(ad.concat([loc, dims, ad.as_value(yaw).reshape(1)]), w)

        yield "geometry", "decode-pose", s, TOL_DEFAULT, p, fn


def decoder_suite(seeds=range(2)):
    gen = _decoder()
    for s in seeds:
        rng = np.random.default_rng([s, 404])
        sh, tx = sample_sphere(rng, 2)
        wv = rng.normal(size=(gen.n_vertices, 3))
        wt = rng.normal(size=(6, gen.tex_size, gen.tex_size, 3))

        def fn_shape(q, wv=wv):
            return _contract(gen.shape_values(project_to_sphere(q["h_sh"])), wv)

        def fn_tex(q, wt=wt):
            return _contract(gen.texture_values(project_to_sphere(q["h_tx"])), wt)

        yield "decoder", "shape", s, TOL_DEFAULT, {"h_sh": sh}, fn_shape
        yield "decoder", "texture", s, TOL_DEFAULT, {"h_tx": tx}, fn_tex


def loss_suite(seeds=range(2)):
    weights = LossWeights()
    for s in seeds:
        rng = np.random.default_rng([s, 505])
        n = 12
        img, ren = rng.uniform(size=(n, n, 3)), rng.uniform(size=(n, n, 3))
        ren[np.abs(img - ren) < 1e-3] += 0.01
        yield "loss", "pixel", s, TOL_DEFAULT, {"rendered": ren}, lambda q, img=img: pixel_loss(img, q["rendered"])

        det = Box2D(10.0, 20.0, 60.0, 110.0)
        pred = np.array([10.0, 20.0, 60.0, 110.0]) + rng.uniform(-8, 8, size=4)
        yield ("loss", "box", s, TOL_DEFAULT, {"pred": pred},
               lambda q, det=det: box_loss(box_iou(q["pred"], det), weights.t_b))

        mask = (rng.uniform(size=(n, n)) > 0.5).astype(float)
        sil = rng.uniform(0.05, 0.95, size=(n, n))
        yield ("loss", "silhouette", s, TOL_DEFAULT, {"sil": sil},
               lambda q, mask=mask: silhouette_loss(mask, q["sil"])[0])

        depth = rng.uniform(5, 20, size=(n, n))
        rd = depth + rng.choice([-1, 1], size=(n, n)) * rng.uniform(0.1, 2.0, size=(n, n))
        yield ("loss", "depth", s, TOL_DEFAULT, {"rendered_depth": rd},
               lambda q, depth=depth, mask=mask, sil=sil: depth_loss(depth, q["rendered_depth"], mask, sil))

        mu = np.array([1.53, 1.63, 3.88])
        dims = mu + rng.choice([-1, 1], size=3) * rng.uniform(0.05, 0.5, size=3)
        yield "loss", "dim", s, TOL_DEFAULT, {"dims": dims}, lambda q, mu=mu: dim_regularizer(q["dims"], mu)

        comps = {k: rng.uniform(0.1, 2.0) for k in LOSS_NAMES}
        yield ("loss", "total", s, TOL_DEFAULT, comps,
               lambda q: total_loss({k: q[k] for k in LOSS_NAMES}, weights))

        lat = {"sh": sample_sphere(rng, 4), "tx": sample_sphere(rng, 4)}
        r_sh, r_tx = sample_sphere(rng, 4), sample_sphere(rng, 4)
        yield ("loss", "hypersphere", s, TOL_DEFAULT, lat,
               lambda q, r_sh=r_sh, r_tx=r_tx: hypersphere_regularizer(q["sh"], q["tx"], r_sh, r_tx))


def pipeline_suite(seeds=range(2)):
    for s in seeds:
        rng = np.random.default_rng([s, 606])
        p, fn = _pipeline_case(rng)
        yield "pipeline", "total-loss", s, TOL_RASTER, p, fn


SUITES = {
    "ops": op_suite,
    "raster": raster_suite,
    "geometry": geometry_suite,
    "decoder": decoder_suite,
    "losses": loss_suite,
    "pipeline": pipeline_suite,
}


def run_suites(names=None, h=STEP, report=None):
    """Run the named suites (default: all); ``report`` is called with each :class:`CheckResult`."""
    results = []
    for name in names or SUITES:
        for suite, label, seed, tol, inputs, fn in SUITES[name]():
            rng = np.random.default_rng([seed, 999])
            t0 = time.perf_counter()
            err, count = check_gradient(fn, inputs, rng, h=h)
            res = CheckResult(suite, label, seed, err, tol, count, time.perf_counter() - t0)
            results.append(res)
            if report is not None:
                report(res)
    return results
