import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rendfit.errors import ConfigError, ParseError, RendfitError
from rendfit.geometry import Box2D, CameraIntrinsics, Cuboid3D
from rendfit.imaging import nearest_resize, read_pfm, read_ppm, write_pfm, write_ppm
from rendfit.io.config import KEYS, RunConfig, format_config, load_config, parse_config
from rendfit.io.detections import Detection, format_detections, parse_detections, rle_decode, rle_encode
from rendfit.io.kitti import CuboidLabel, format_label, parse_label, read_labels, write_labels
from rendfit.io.pipeline import (
    FrameInput,
    build_evidence,
    filter_detections,
    foreground_map,
    frame_seed,
    load_frame,
    read_calib,
    run_frame,
    write_frame_result,
)

H, W = 120, 160


def det(top, left, bottom, right, score=0.9, klass="Car", shape=(H, W)):
    m = np.zeros(shape, dtype=bool)
    m[int(top):int(bottom), int(left):int(right)] = True
    return Detection(Box2D(top, left, bottom, right), score, m, klass)


# ---------------------------------------------------------------------------
# filtering


def test_filter_reason_codes():
    dets = [det(40, 40, 58, 80), det(40, 40, 80, 80, score=0.05), det(40, 40, 70, 80, score=0.9)]
    kept, rej = filter_detections(dets, (H, W))
    assert rej == [(0, "min-height"), (1, "low-confidence")]
    assert kept == [dets[2]]


def test_filter_boundary_and_class():
    dets = [det(1, 40, 60, 80), det(40, 40, 80, 80, klass="Pedestrian"), det(40, 40, 80, W - 1)]
    _, rej = filter_detections(dets, (H, W), klass="Car")
    assert rej == [(0, "boundary"), (1, "class"), (2, "boundary")]
    _, rej = filter_detections(dets[2:], (H, W), margin=0.5)
    assert rej == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 80), st.floats(1, 60), st.floats(1, 80),
                          st.floats(0, 1)), max_size=6), st.randoms(use_true_random=False))
def test_filter_idempotent_and_order_free(boxes, rnd):
    dets = [Detection(Box2D(t, l, t + h, l + w), s, np.zeros((1, 1), bool)) for t, l, h, w, s in boxes]
    kept, _ = filter_detections(dets, (H, W))
    again, rej = filter_detections(kept, (H, W))
    assert again == kept and rej == []
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    kept2, _ = filter_detections(shuffled, (H, W))
    assert sorted(map(id, kept2)) == sorted(map(id, kept))


# ---------------------------------------------------------------------------
# foreground and evidence


def test_foreground_union():
    a, b = det(10, 10, 30, 30).mask, det(50, 50, 60, 70).mask
    assert np.array_equal(foreground_map([a]), a)
    assert foreground_map([a, b]).sum() == a.sum() + b.sum()
    c = det(20, 20, 40, 40).mask
    assert foreground_map([a, c]).sum() < a.sum() + c.sum()
    assert not foreground_map([], (4, 5)).any()
    with pytest.raises(ValueError):
        foreground_map([a, np.zeros((3, 3), bool)])


def frame_with(dets, rng=None):
    rng = rng or np.random.default_rng(0)
    image = rng.random((H, W, 3))
    depth = np.full((H, W), 12.5)
    return FrameInput("000000", image, dets, depth, CameraIntrinsics(100.0, 100.0, W / 2, H / 2, W, H))


def test_identity_crop_copies_subimage():
    d = det(20, 30, 52, 62)
    frame = frame_with([d])
    ev = build_evidence(d, frame, (32, 32))
    assert np.allclose(ev.rgb, frame.image[20:52, 30:62], atol=1e-12)
    assert np.all(ev.depth == 12.5)
    assert set(np.unique(ev.foreground)) == {1.0}
    assert ev.score == 0.9


def test_resized_mask_stays_binary():
    d = det(20, 30, 77, 101)
    ev = build_evidence(d, frame_with([d]), (64, 48))
    assert set(np.unique(ev.foreground)) <= {0.0, 1.0}
    assert ev.rgb.shape == (64, 48, 3)


def test_background_is_masked_out_of_rgb():
    d = det(20, 30, 52, 62)
    other = det(0, 0, 1, 1)
    d.mask[:] = False
    d.mask[30:40, 40:50] = True
    ev = build_evidence(d, frame_with([d, other]), (32, 32))
    assert np.all(ev.rgb[:10] == 0.0)
    assert np.all(ev.rgb[10:20, 10:20] > 0.0)


def test_evidence_outside_image():
    d = Detection(Box2D(200, 200, 260, 260), 0.9, np.zeros((H, W), bool))
    with pytest.raises(RendfitError):
        build_evidence(d, frame_with([]))


def test_nearest_resize_integer_downsample():
    img = np.arange(16).reshape(4, 4)
    assert np.array_equal(nearest_resize(img, (0, 0, 4, 4), (2, 2)), [[5, 7], [13, 15]])


def test_frame_shape_checks():
    with pytest.raises(ValueError):
        FrameInput("x", np.zeros((4, 4, 3)), [], np.zeros((4, 5)), None)
    with pytest.raises(ValueError):
        FrameInput("x", np.zeros((4, 4, 3)), [det(0, 0, 1, 1, shape=(3, 3))], np.zeros((4, 4)), None)


def test_run_frame_without_detections():
    res = run_frame(frame_with([]), RunConfig(iterations=2))
    assert res.labels == [] and res.failures == []


def test_frame_seed_is_stable():
    assert frame_seed(0, "000007") == frame_seed(0, "000007")
    assert frame_seed(0, "000007") != frame_seed(1, "000007")
    assert 0 <= frame_seed(123456789, "abc") < 2**31


# ---------------------------------------------------------------------------
# KITTI labels


def sample_label(score=None, type="Car"):
    return CuboidLabel(type, 0.0, 1, -1.234567, (100.25, 200.5, 180.75, 330.0), (1.52, 1.63, 3.9),
                       (1.25, 1.65, 17.5), 0.785398, score)


@pytest.mark.parametrize("score", [None, 0.4375])
def test_label_round_trip(tmp_path, score):
    lab = sample_label(score)
    write_labels([lab, lab], tmp_path / "a.txt")
    back = read_labels(tmp_path / "a.txt")
    assert back == [lab, lab]
    assert len(format_label(lab).split()) == (15 if score is None else 16)


def test_label_unknown_type_and_bad_lines(tmp_path):
    with pytest.raises(ParseError, match="unknown object type"):
        parse_label(format_label(sample_label(type="Car")).replace("Car", "Bus", 1))
    p = tmp_path / "bad.txt"
    p.write_text(format_label(sample_label()) + "\n" + "Car 0 0 0 1 2 3\n")
    with pytest.raises(ParseError) as exc:
        read_labels(p)
    assert exc.value.line == 2


def test_label_bottom_center_conversion():
    cub = Cuboid3D((2.0, 0.9, 20.0), (1.5, 1.6, 4.0), 0.3)
    lab = CuboidLabel.from_cuboid(cub, (0, 0, 10, 10), score=0.5)
    assert lab.location == pytest.approx((2.0, 1.65, 20.0))
    assert lab.alpha == pytest.approx(0.3 - math.atan2(2.0, 20.0))
    back = lab.cuboid()
    assert back.location == pytest.approx(cub.location) and back.yaw == cub.yaw


# ---------------------------------------------------------------------------
# detections


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_rle_round_trip(h, w, seed):
    m = np.random.default_rng(seed).random((h, w)) < 0.5
    runs = rle_encode(m)
    assert sum(runs) == h * w and all(r > 0 for r in runs[1:])
    assert np.array_equal(rle_decode(runs, (h, w)), m)


def test_rle_leading_foreground():
    assert rle_encode(np.array([[True, True, False]])) == [0, 2, 1]


def test_detection_file_round_trip():
    d = det(10, 20, 40, 60, score=0.75)
    shape, back = parse_detections(format_detections([d], (H, W)))
    assert shape == (H, W)
    assert back[0].box == d.box and back[0].score == 0.75 and np.array_equal(back[0].mask, d.mask)


@pytest.mark.parametrize("text, line", [
    ("size 2 2\ndet Car 0.5 0 0 1 1 2 1\n", 2),
    ("size 2 2\ndet Car 0.5 0 0 1 1 2 1 2\n", 2),
    ("size 2 2\ndet Car 1.5 0 0 1 1 1 4\n", 2),
    ("det Car 0.5 0 0 1 1 1 4\n", 1),
    ("size 2 2\nfoo\n", 2),
    ("size 2 2\ndet Car\n", 2),
    ("# nothing\n", None),
])
def test_detection_parse_errors(text, line):
    with pytest.raises(ParseError) as exc:
        parse_detections(text)
    assert exc.value.line == line


# ---------------------------------------------------------------------------
# images, calibration, config


def test_ppm_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    img = np.round(rng.random((5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    d = rng.random((5, 7)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "a.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), d)


@pytest.mark.parametrize("ext, writer, arr", [
    ("ppm", write_ppm, np.zeros((4, 4, 3))),
    ("pfm", write_pfm, np.zeros((4, 4))),
])
def test_truncated_images_rejected(tmp_path, ext, writer, arr):
    p = tmp_path / f"a.{ext}"
    writer(p, arr)
    raw = p.read_bytes()
    reader = read_ppm if ext == "ppm" else read_pfm
    for cut in (len(raw) - 1, 5, 2):
        p.write_bytes(raw[:cut])
        with pytest.raises(ParseError):
            reader(p)


def test_calib(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("P0: 1 2\nP2: 700 0 600 45 0 710 170 0.2 0 0 1 0.003\n")
    K = read_calib(p, 1242, 375)
    assert (K.fx, K.fy, K.cx, K.cy, K.width, K.height) == (700, 710, 600, 170, 1242, 375)
    p.write_text("P2: 1 2 3\n")
    with pytest.raises(ParseError):
        read_calib(p, 10, 10)
    p.write_text("R0: 1\n")
    with pytest.raises(ParseError):
        read_calib(p, 10, 10)


def test_config_defaults_and_overrides():
    cfg = parse_config("iterations = 20\nlambda_d = 0.5  # comment\nmu_d = 1, 2, 3\nescape = off\n",
                       env={"RENDFIT_ITERATIONS": "7", "OTHER": "x"})
    assert cfg.iterations == 7 and cfg.lambda_d == 0.5 and cfg.mu_d == (1.0, 2.0, 3.0) and not cfg.escape
    assert cfg.fit_config().iterations == 7
    assert load_config(env={}) == RunConfig()
    assert parse_config(format_config(cfg), env={}) == cfg
    assert set(KEYS) >= {"seed", "sigma", "score_threshold", "min_height", "mask_mode"}


@pytest.mark.parametrize("text, env", [
    ("bogus = 1\n", {}),
    ("iterations 3\n", {}),
    ("iterations = many\n", {}),
    ("", {"RENDFIT_NOPE": "1"}),
    ("mask_mode = semantic\n", {}),
    ("sigma = -1\n", {}),
])
def test_config_errors(text, env):
    with pytest.raises(ConfigError):
        parse_config(text, env=env)


# ---------------------------------------------------------------------------
# whole frame


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    from rendfit.evaluator import bev_iou
    from rendfit.generator import make_generator
    from rendfit.synth import write_synthetic_frames

    root = tmp_path_factory.mktemp("synth")
    write_synthetic_frames(root, 1, make_generator("decoder", 0), seed=0, n_objects=1)
    cfg = RunConfig()
    frame = load_frame(root, "000000")
    return root, frame, run_frame(frame, cfg), read_labels(root / "label_2" / "000000.txt"), bev_iou


def test_synthetic_single_object_frame(synthetic_run, tmp_path):
    root, frame, res, truth, _ = synthetic_run
    assert len(frame.detections) == 1 and len(res.labels) == 1 and not res.failures
    # range is pinned by the depth evidence even when yaw lands in a wrong basin
    assert res.labels[0].location[2] == pytest.approx(truth[0].location[2], rel=0.05)
    assert res.labels[0].box == truth[0].box
    write_frame_result(res, tmp_path)
    assert read_labels(tmp_path / "label_2" / "000000.txt")[0].score == pytest.approx(res.labels[0].score, abs=1e-6)
    assert (tmp_path / "traces" / "000000_0.csv").exists()
    assert (tmp_path / "reports" / "000000_0.txt").exists()


@pytest.mark.xfail(strict=True, reason="frame 0 converges into the 180-degree yaw basin")
def test_synthetic_frame_meets_bev_tolerance(synthetic_run):
    _, _, res, truth, bev_iou = synthetic_run
    assert bev_iou(res.labels[0].cuboid(), truth[0].cuboid()) >= 0.7


def test_labels_sorted_by_confidence(synthetic_run):
    _, frame, _, _, _ = synthetic_run
    d = frame.detections[0]
    twin = Detection(d.box, 0.3, d.mask, d.klass)
    frame2 = FrameInput(frame.frame_id, frame.image, [twin, d], frame.depth, frame.K)
    res = run_frame(frame2, RunConfig(iterations=5))
    scores = [l.score for l in res.labels]
    assert len(scores) == 2 and scores == sorted(scores, reverse=True)
