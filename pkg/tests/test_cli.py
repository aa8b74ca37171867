import numpy as np
import pytest

from rendfit.cli import main
from rendfit.io.kitti import read_labels


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("frames")
    assert main(["synth", str(root), "--frames", "1", "--objects", "1"]) == 0
    return root


def test_synth_layout(synth_dir):
    for sub in ("image_2", "depth", "calib", "detections", "detections_panoptic", "label_2"):
        assert len(list((synth_dir / sub).glob("000000.*"))) == 1
    assert len(read_labels(synth_dir / "label_2" / "000000.txt")) == 1


def test_fit_then_eval(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("iterations = 3\nescape = false\n")
    out = tmp_path / "out"
    assert main(["fit", str(cfg), str(synth_dir), str(out)]) == 0
    assert "fitted 1 objects in 1 frames" in capsys.readouterr().out
    labels = read_labels(out / "label_2" / "000000.txt")
    assert len(labels) == 1 and labels[0].score is not None
    csv = tmp_path / "ap.csv"
    assert main(["eval", str(out / "label_2"), str(synth_dir / "label_2"), "--metric", "R11",
                 "--view", "BEV", "--threshold", "0.5", "--csv", str(csv)]) == 0
    assert "BEV" in capsys.readouterr().out
    assert csv.read_text().startswith("view,threshold,difficulty,AP,num_gt,num_pred")


def test_eval_reports_missing_files(synth_dir, tmp_path, capsys):
    assert main(["eval", str(tmp_path), str(synth_dir / "label_2")]) == 0
    assert "missing prediction file: 000000.txt" in capsys.readouterr().err


def test_render_debug(synth_dir, tmp_path, capsys):
    prefix = tmp_path / "dbg" / "obj"
    assert main(["render-debug", "-", str(synth_dir), "000000", str(prefix)]) == 2
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("")
    assert main(["render-debug", str(cfg), str(synth_dir), "000000", str(prefix)]) == 0
    out = capsys.readouterr().out
    assert "L_m=" in out
    files = sorted(p.name for p in prefix.parent.iterdir())
    assert "obj_evidence_mask.pfm" in files and any(f.endswith(".ppm") for f in files if "evidence" not in f)
    assert main(["render-debug", str(cfg), str(synth_dir), "000000", str(prefix), "--detection", "5"]) == 2


def test_unknown_config_key_is_fatal(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("wibble = 1\n")
    assert main(["fit", str(cfg), str(synth_dir), str(tmp_path / "o")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--suite", "nope"]) == 2
    assert main(["gradcheck", "--suite", "losses"]) == 0
    assert "checks passed" in capsys.readouterr().out
