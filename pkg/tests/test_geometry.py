import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rendfit import autodiff as ad
from rendfit.errors import BehindCameraError, DegenerateDimensionsError, RotationUndefinedError
from rendfit.geometry import (
    Box2D,
    CameraIntrinsics,
    Cuboid3D,
    DatasetStats,
    SceneParams,
    backproject,
    box_anchors,
    cuboid_vertices,
    decode_pose,
    decode_pose_values,
    project,
    rotation_y,
    yaw_of,
)
from rendfit.gradcheck import TOL_DEFAULT, check_gradient, random_params


def test_box_anchors_substitution():
    assert box_anchors(Box2D(100, 200, 200, 400)) == (150, 300, 50, 100)


def test_box_anchors_small_box():
    assert box_anchors(Box2D(0, 0, 2, 2)) == (1, 1, 1, 1)


def test_anchor_u_comes_from_vertical_extent():
    c_u, c_v, s_u, s_v = box_anchors(Box2D(10, 500, 30, 900))
    assert (c_u, s_u) == (20, 10) and (c_v, s_v) == (700, 200)


def test_invalid_box_and_camera_rejected():
    with pytest.raises(ValueError):
        Box2D(10, 0, 5, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 700, 10, 640, 480)
    with pytest.raises(ValueError):
        DatasetStats(20, 0.0, (1, 1, 1), (1, 1, 1))


def test_decode_zero_offsets(box):
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    stats = DatasetStats(20.0, 10.0, (1.5, 1.6, 3.9), (0.1, 0.1, 0.1))
    loc, dims, yaw = decode_pose_values(SceneParams().as_arrays(), box, K, stats)
    u, v = 150.0, 350.0
    np.testing.assert_allclose(loc.data, [(v - 320) * 20 / 500, (u - 240) * 20 / 500, 20.0], atol=1e-12)
    np.testing.assert_allclose(dims.data, [1.5, 1.6, 3.9], atol=1e-15)
    assert float(yaw.data) == 0.0
    # the centroid projects back onto (v, u) = (350, 150): horizontal v, vertical u
    np.testing.assert_allclose(project(loc.data, K).data, [350.0, 150.0], atol=1e-9)


def test_decode_rejects_behind_camera(box, camera, stats):
    p = SceneParams(h_z=-(stats.mu_z - 0.05) / stats.sigma_z)
    with pytest.raises(BehindCameraError):
        decode_pose(p, box, camera, stats)


def test_decode_rejects_degenerate_dimensions(box, camera, stats):
    p = SceneParams(h_dim=np.array([-20.0, 0.0, 0.0]))
    with pytest.raises(DegenerateDimensionsError):
        decode_pose(p, box, camera, stats)


@pytest.mark.parametrize("seed", range(5))
def test_decode_pose_gradient(seed, camera, stats):
    rng = np.random.default_rng(seed)
    p = random_params(rng).as_arrays()
    box = Box2D(120.0, 400.0, 210.0, 560.0)
    w = rng.normal(size=7)

    def fn(q):
        loc, dims, yaw = decode_pose_values(q, box, camera, stats)
        return (ad.concat([loc, dims, yaw.reshape(1)]) * w).sum()

    err, _ = check_gradient(fn, {k: p[k] for k in ("h_u", "h_v", "h_z", "h_dim", "h_sin", "h_cos")}, rng)
    assert err < TOL_DEFAULT


def test_yaw_of_examples():
    assert float(yaw_of(0.0, 1.0).data) == 0.0
    assert float(yaw_of(1.0, 0.0).data) == pytest.approx(math.pi / 2, abs=1e-15)
    assert float(yaw_of(0.5, 0.5).data) == pytest.approx(math.pi / 4, abs=1e-15)
    with pytest.raises(RotationUndefinedError):
        yaw_of(1e-10, -1e-10)


def test_yaw_gradient_at_quarter_turn():
    err, _ = check_gradient(lambda q: yaw_of(q["s"], q["c"]), {"s": 0.5, "c": 0.5}, np.random.default_rng(0))
    assert err < TOL_DEFAULT


@settings(max_examples=60, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(0.01, 100.0))
def test_yaw_scale_invariance(angle, s):
    a = float(yaw_of(math.sin(angle), math.cos(angle)).data)
    b = float(yaw_of(s * math.sin(angle), s * math.cos(angle)).data)
    assert abs(a - b) < 1e-12
    assert -math.pi < a <= math.pi or a == pytest.approx(math.pi)


def test_unit_cube_corners():
    v = cuboid_vertices(Cuboid3D((0, 0, 0), (1, 1, 1), 0.0))
    assert sorted(map(tuple, v)) == sorted((x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5))


def test_quarter_turn_swaps_x_and_z_extents():
    c0 = cuboid_vertices(Cuboid3D((0, 0, 0), (1.0, 2.0, 4.0), 0.0))
    c1 = cuboid_vertices(Cuboid3D((0, 0, 0), (1.0, 2.0, 4.0), math.pi / 2))
    ext = lambda v: np.ptp(v, axis=0)
    np.testing.assert_allclose(ext(c0), [4.0, 1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(ext(c1), [2.0, 1.0, 4.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.floats(-20, 20), st.floats(-3, 3), st.floats(1, 60)),
       st.tuples(st.floats(0.2, 5), st.floats(0.2, 5), st.floats(0.2, 8)), st.floats(-math.pi, math.pi))
def test_cuboid_corners_round_trip(loc, dims, yaw):
    v = cuboid_vertices(Cuboid3D(loc, dims, yaw))
    h, w, l = dims
    unit = (v - np.asarray(loc)) @ rotation_y(yaw) / np.array([l / 2, h / 2, w / 2])
    assert np.abs(np.abs(unit) - 1.0).max() < 1e-12


def test_project_examples():
    K = CameraIntrinsics(100, 100, 320, 240, 640, 480)
    np.testing.assert_allclose(project(np.array([0.0, 0.0, 10.0]), K).data, [320, 240])
    np.testing.assert_allclose(project(np.array([1.0, 0.0, 10.0]), K).data, [330, 240])
    with pytest.raises(BehindCameraError):
        project(np.array([[0.0, 0.0, 0.0]]), K)


def test_project_backproject_round_trip(camera):
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-20, 20, 200), rng.uniform(-3, 3, 200), rng.uniform(0.5, 80, 200)])
    pix = project(pts, camera).data
    back = backproject(pix[:, 0], pix[:, 1], pts[:, 2], camera).data
    assert np.abs(back - pts).max() < 1e-10


def test_projected_box_shrinks_with_depth(camera):
    heights = []
    for z in (6.0, 9.0, 15.0, 30.0):
        pix = project(cuboid_vertices(Cuboid3D((1.0, 0.8, z), (1.5, 1.6, 3.9), 0.4)), camera).data
        heights.append((np.ptp(pix[:, 0]), np.ptp(pix[:, 1])))
    assert all(a[0] > b[0] and a[1] > b[1] for a, b in zip(heights, heights[1:]))
