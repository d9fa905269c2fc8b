from __future__ import annotations

import importlib.util
from pathlib import Path

import numpy as np
import orjson
import pytest

from oldn.cli import main
from oldn.codec_sim import QpConfig, degrade_frame, load_image, rgb_to_yuv420, save_image
from oldn.metrics import psnr
from oldn.settings import OfflineConfig
from oldn.storage import read_report, save_model

TINY_CONF = """
qps = 32
model.n = 8
model.expand = 2
model.cab_reduction = 4
model.n_wb_branch = 1
model.recon_blocks = olwb, wb
online.steps = 2
online.lr = 0.01
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONF)
    return str(path)


def _json(capsys):
    return orjson.loads(capsys.readouterr().out)


def test_dctcheck_passes(capsys):
    assert main(["dctcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert {line.split()[1] for line in lines} == {"dct.identity", "dct.naive_oracle", "dct.parseval"}
    assert all(line.startswith("ok") for line in lines)


@pytest.mark.slow
def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_qp_out_of_range_is_a_config_error(conf):
    assert main(["simulate", "--config", conf, "--image", "synthetic:1:32x32", "--qp", "60"]) == 2


def test_missing_image_reports_error(conf, tmp_path):
    assert main(["simulate", "--config", conf, "--image", str(tmp_path / "nope.png")]) == 2


def test_simulate(conf, capsys):
    assert main(["simulate", "--config", conf, "--image", "synthetic:1:32x32", "--steps", "0"]) == 0
    out = _json(capsys)
    assert [run["qp"] for run in out["runs"]] == [32]
    assert out["runs"][0]["parity_ok"] is True


def test_encode_then_enhance(conf, tmp_path, tiny_model, rgb_32, capsys):
    checkpoint = save_model(tmp_path / "tiny.oldn", tiny_model)
    raw = rgb_to_yuv420(rgb_32)
    degraded, _ = degrade_frame(raw, QpConfig(37))
    save_image(tmp_path / "raw.yuv", raw)
    save_image(tmp_path / "deg.yuv", degraded)
    size = ["--width", "32", "--height", "32"]

    assert main([
        "encode", "--config", conf, "--checkpoint", str(checkpoint),
        "--raw", str(tmp_path / "raw.yuv"), "--degraded", str(tmp_path / "deg.yuv"),
        "--out", str(tmp_path / "frame"), *size,
    ]) == 0
    encoded = _json(capsys)
    assert encoded["steps"] == 2
    assert (tmp_path / "frame.u.alrs").exists() and (tmp_path / "frame.v.alrs").exists()

    assert main([
        "enhance", "--config", conf, "--checkpoint", str(checkpoint),
        "--degraded", str(tmp_path / "deg.yuv"), "--out", str(tmp_path / "out.yuv"),
        "--stream-u", str(tmp_path / "frame.u.alrs"), "--stream-v", str(tmp_path / "frame.v.alrs"), *size,
    ]) == 0
    assert _json(capsys)["planes"] == {"u": "stream", "v": "stream"}
    out = load_image(tmp_path / "out.yuv", width=32, height=32)
    np.testing.assert_array_equal(out.y.samples, degraded.y.samples)
    for name in ("u", "v"):
        assert psnr(out.chroma(name), raw.chroma(name)) == pytest.approx(encoded["planes"][name]["enhanced_psnr"])


def test_enhance_without_streams_uses_baseline(conf, tmp_path, tiny_model, rgb_32, capsys):
    checkpoint = save_model(tmp_path / "tiny.oldn", tiny_model)
    save_image(tmp_path / "deg.yuv", rgb_to_yuv420(rgb_32))
    assert main([
        "enhance", "--config", conf, "--checkpoint", str(checkpoint), "--degraded", str(tmp_path / "deg.yuv"),
        "--width", "32", "--height", "32", "--out", str(tmp_path / "out.yuv"),
    ]) == 0
    assert _json(capsys)["planes"] == {"u": "baseline", "v": "baseline"}


def test_train_writes_checkpoint(conf, tmp_path, capsys):
    manifest = tmp_path / "train.txt"
    manifest.write_text("synthetic:1:64x64 37\nsynthetic:2:64x64\n")
    out = tmp_path / "trained.oldn"
    assert main([
        "train", "--config", conf, "--manifest", str(manifest), "--out", str(out),
        "--epochs", "1", "--patches", "2", "--batch-size", "4", "--n", "8",
    ]) == 0
    result = _json(capsys)
    assert result["pairs"] == 2 * 2 * 2
    assert out.exists()


def test_evaluate_writes_report(conf, tmp_path, capsys):
    report = tmp_path / "report.csv"
    assert main([
        "evaluate", "--config", conf, "--out", str(report),
        "--image", "synthetic:3:32x32", "--image", "synthetic:4:32x32",
    ]) == 0
    out = _json(capsys)
    rows, summary = read_report(report)
    assert len(rows) == 2
    assert out["summary"] == summary
    assert summary["config"]["qps"] == [32]


def _desk_script():
    path = Path(__file__).resolve().parents[1] / "scripts" / "desk_acceptance.py"
    spec = importlib.util.spec_from_file_location("desk_acceptance", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_desk_script_defaults_follow_offline_config():
    args = _desk_script().build_parser().parse_args([])
    assert args.lr == OfflineConfig().lr
    assert 0.0 < args.holdout < 1.0
