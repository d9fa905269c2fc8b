from __future__ import annotations

import struct

import numpy as np
import pytest

from oldn.errors import CheckpointError, ImageFormatError, UnsupportedFormatError
from oldn.storage import (
    SUMMARY_MARKER,
    decode_checkpoint,
    decode_pnm,
    encode_checkpoint,
    encode_pnm,
    load_model,
    read_report,
    read_yuv420,
    render_report,
    save_model,
    write_yuv420,
)


class TestCheckpoint:
    def test_layout(self):
        data = encode_checkpoint({"b": np.ones((1, 2, 1, 1)), "a": np.zeros((1, 1, 1, 1))})
        assert data[:4] == b"OLDN"
        assert struct.unpack_from("<II", data, 4) == (1, 2)
        name_len = struct.unpack_from("<H", data, 12)[0]
        assert data[14:14 + name_len] == b"a"

    def test_round_trip(self, tiny_model, tmp_path):
        path = save_model(tmp_path / "m.oldn", tiny_model)
        loaded = load_model(path)
        assert loaded.config == tiny_model.config
        for p in tiny_model.paths():
            np.testing.assert_array_equal(loaded[p].data, tiny_model[p].data)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError) as err:
            decode_checkpoint(b"NOPE" + bytes(8))
        assert err.value.code == "checkpoint_magic"

    def test_truncated(self):
        data = encode_checkpoint({"w": np.ones((2, 2, 3, 3))})
        with pytest.raises(CheckpointError) as err:
            decode_checkpoint(data[:-5])
        assert err.value.code == "checkpoint_truncated"

    def test_wrong_version(self):
        data = bytearray(encode_checkpoint({"w": np.ones((1, 1, 1, 1))}))
        data[4:8] = struct.pack("<I", 7)
        with pytest.raises(CheckpointError) as err:
            decode_checkpoint(bytes(data))
        assert err.value.code == "checkpoint_version"

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "absent.oldn")


class TestPnm:
    def test_pgm_round_trip(self, rng):
        img = rng.integers(0, 256, (5, 7), dtype=np.uint8)
        np.testing.assert_array_equal(decode_pnm(encode_pnm(img)), img)

    def test_header_comments(self):
        data = b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9])
        np.testing.assert_array_equal(decode_pnm(data), [[7, 9]])

    def test_maxval_not_255(self):
        with pytest.raises(UnsupportedFormatError):
            decode_pnm(b"P5\n2 2\n1023\n" + bytes(8))

    def test_ascii_variant_unsupported(self):
        with pytest.raises(UnsupportedFormatError):
            decode_pnm(b"P2\n1 1\n255\n0\n")

    def test_raster_size_mismatch(self):
        with pytest.raises(ImageFormatError):
            decode_pnm(b"P6\n2 2\n255\n" + bytes(5))

    def test_rejects_float_samples(self):
        with pytest.raises(ImageFormatError):
            encode_pnm(np.zeros((2, 2)))


class TestYuv:
    def test_round_trip(self, tmp_path, rng):
        y = rng.integers(0, 256, (4, 6), dtype=np.uint8)
        u = rng.integers(0, 256, (2, 3), dtype=np.uint8)
        v = rng.integers(0, 256, (2, 3), dtype=np.uint8)
        path = write_yuv420(tmp_path / "f.yuv", y, u, v)
        assert path.stat().st_size == 36
        for a, b in zip(read_yuv420(path, 6, 4), (y, u, v)):
            np.testing.assert_array_equal(a, b)

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "short.yuv"
        path.write_bytes(bytes(35))
        with pytest.raises(ImageFormatError):
            read_yuv420(path, 6, 4)

    def test_odd_dimensions(self, tmp_path):
        with pytest.raises(ImageFormatError):
            read_yuv420(tmp_path / "x.yuv", 5, 4)


class TestReport:
    def test_render_and_read(self, tmp_path):
        rows = [{"image": "a", "qp": 22, "psnr": 30.123456, "ok": True}, {"image": "b", "qp": 27, "psnr": None, "ok": False}]
        data = render_report(["image", "qp", "psnr", "ok"], rows, {"rows": 2, "mean": 1.5})
        text = data.decode()
        assert text.splitlines()[0] == "image,qp,psnr,ok"
        assert "a,22,30.1235,true" in text
        assert "b,27,,false" in text
        path = tmp_path / "r.csv"
        path.write_bytes(data)
        table, summary = read_report(path)
        assert [r["image"] for r in table] == ["a", "b"]
        assert summary == {"mean": 1.5, "rows": 2}
        assert SUMMARY_MARKER in text

    def test_render_is_deterministic(self):
        rows = [{"x": 1.0}]
        assert render_report(["x"], rows, {"b": 1, "a": 2}) == render_report(["x"], rows, {"a": 2, "b": 1})
