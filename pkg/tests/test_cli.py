import csv
import json

import numpy as np
import pytest
import torch

from instrseg import _io
from instrseg.cli import main
from instrseg.models import ModelSpec, build_model, save_checkpoint


def _settings(capsys):
    """First stdout line is the resolved configuration."""
    return json.loads(capsys.readouterr().out.splitlines()[0])


@pytest.mark.parametrize("argv", [
    [],
    ["segment"],
    ["synth"],
    ["synth", "--out", "x", "--count", "three"],
    ["train", "--model", "segnet", "--data", "d", "--out", "o"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "overlay" in capsys.readouterr().out


def test_domain_errors_exit_1(tmp_path, synth_root, capsys):
    assert main(["evaluate", "--pred", str(tmp_path), "--truth", str(synth_root),
                 "--report", str(tmp_path / "r.json")]) == 1
    assert main(["overlay", "--image", str(tmp_path / "none.png"), "--mask", str(tmp_path / "none.png"),
                 "--out", str(tmp_path / "o.png")]) == 1
    assert "instrseg:" in capsys.readouterr().err


def test_flag_beats_config_beats_default(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("count: 3\nseed: 5\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d"), "--count", "2"]) == 0
    s = _settings(capsys)
    assert (s["count"], s["seed"], s["height"]) == (2, 5, 128)
    assert len(list((tmp_path / "d" / "images").rglob("*.png"))) == 2


def test_config_keyed_by_command(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"count": 1, "height": 32, "width": 32}, "train": {"epochs": 4}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert _settings(capsys)["count"] == 1


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("cuont: 3\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "cuont" in capsys.readouterr().err


def test_predict_threshold_defaults_to_point_three(tmp_path, synth_root, capsys):
    torch.manual_seed(0)
    ck = save_checkpoint(tmp_path / "m.pt", build_model(ModelSpec("unet", 1, base_width=4)), {"task": "binary"})
    assert main(["predict", "--checkpoint", str(ck), "--data", str(synth_root), "--out", str(tmp_path / "p"),
                 "--fold", "0"]) == 0
    s = _settings(capsys)
    assert s["threshold"] == 0.3
    assert json.loads((tmp_path / "p" / "manifest.json").read_text())["threshold"] == 0.3
    # fold 0 validates on sequences 1 and 3
    assert sorted(p.parent.name for p in (tmp_path / "p" / "binary_masks").rglob("*.png")) == ["seq1", "seq3"]


def test_sweep_writes_report_table_and_figure(tmp_path, synth_root, capsys):
    torch.manual_seed(0)
    ck = save_checkpoint(tmp_path / "m.pt", build_model(ModelSpec("unet", 1, base_width=4)), {"task": "binary"})
    report = tmp_path / "sweep.json"
    assert main(["sweep", "--checkpoint", str(ck), "--data", str(synth_root), "--thresholds", "0.2,0.5,0.8",
                 "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert [p["threshold"] for p in data["points"]] == [0.2, 0.5, 0.8]
    rows = list(csv.reader(report.with_suffix(".csv").open()))
    assert rows[0] == ["threshold", "mean_iou", "foreground_pixels"] and len(rows) == 4
    assert report.with_suffix(".png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_benchmark_report(tmp_path, capsys):
    report = tmp_path / "bench.json"
    argv = ["benchmark", "--models", "unet,linknet34", "--height", "32", "--width", "32",
            "--warmup", "1", "--reps", "10", "--report", str(report), "--device", "cpu"]
    assert main(argv) == 0
    data = json.loads(report.read_text())
    assert [r["model"] for r in data["reports"]] == ["U-Net", "LinkNet-34"]
    assert data["fastest"] in {"U-Net", "LinkNet-34"}
    assert report.with_suffix(".csv").exists() and report.with_suffix(".png").exists()


# overlays

def _image(tmp_path, shape=(4, 4)):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (*shape, 3), dtype=np.uint8)
    _io.write_png(tmp_path / "img.png", img)
    return img


def _overlay(tmp_path, mask, *extra):
    _io.write_png(tmp_path / "mask.png", mask)
    out = tmp_path / "out.png"
    code = main(["overlay", "--image", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.png"),
                 "--out", str(out), *extra])
    assert code == 0
    return _io.read_image(out)


def test_overlay_background_is_noop(tmp_path, capsys):
    img = _image(tmp_path)
    assert np.array_equal(_overlay(tmp_path, np.zeros((4, 4), np.uint8)), img)


def test_overlay_full_alpha_paints_blue(tmp_path, capsys):
    _image(tmp_path)
    out = _overlay(tmp_path, np.full((4, 4), 255, np.uint8), "--alpha", "1.0")
    assert (out.reshape(-1, 3) == [0, 0, 255]).all()


def test_overlay_parts_colours_distinct(tmp_path, capsys):
    _image(tmp_path)
    mask = np.array([[10, 20], [30, 40]], np.uint8).repeat(2, 0).repeat(2, 1)
    out = _overlay(tmp_path, mask, "--task", "parts", "--alpha", "1.0")
    assert len({tuple(out[r, c]) for r in (0, 2) for c in (0, 2)}) == 4


def test_overlay_rejects_unknown_codes(tmp_path, capsys):
    _image(tmp_path)
    _io.write_png(tmp_path / "mask.png", np.full((4, 4), 7, np.uint8))
    assert main(["overlay", "--image", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.png"),
                 "--out", str(tmp_path / "o.png")]) == 1
