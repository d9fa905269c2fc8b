from __future__ import annotations

import numpy as np
import pytest

from oldn.codec_sim import QpConfig, degrade_frame, rgb_to_yuv420
from oldn.errors import ConfigError, ShapeError, TrainingError
from oldn.network import ModelParams, build_oldn, oldn_forward, zero_convs
from oldn.settings import ModelConfig, OfflineConfig, OnlineConfig
from oldn.storage import save_model
from oldn.tensor_core import Precision, Tensor4, finite_diff_check, no_grad
from oldn.training import (
    AdamState,
    ManifestRecord,
    PatchDataset,
    adam_step,
    build_dataset,
    evaluate_dataset,
    extract_patches,
    mse_loss,
    parse_manifest,
    split_dataset,
    tile_origins,
    train_offline,
    train_online,
    train_online_plane,
)


def _single(value: float) -> ModelParams:
    return ModelParams(ModelConfig(), {"x.al.weight": Tensor4(np.full((1, 1, 1, 1), value))})


def _dataset_loss(params: ModelParams, ds: PatchDataset) -> float:
    with no_grad():
        y, c, target = ds.batch(np.arange(len(ds)), params.precision)
        return float(mse_loss(oldn_forward(params, y, c), target).data.reshape(()))


class TestLossAndAdam:
    def test_mse_value(self):
        pred = Tensor4(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        target = Tensor4(np.zeros((1, 1, 2, 2)))
        assert float(mse_loss(pred, target).data.reshape(())) == pytest.approx(7.5)

    def test_mse_gradient(self, rng):
        target = Tensor4(rng.standard_normal((2, 1, 4, 4)))
        x = Tensor4(rng.standard_normal((2, 1, 4, 4)))
        assert finite_diff_check(lambda v: mse_loss(v, target), x, eps=1e-3) < 1e-6

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor4(np.zeros((1, 1, 2, 2))), Tensor4(np.zeros((1, 1, 2, 4))))

    def test_first_adam_step_moves_by_lr(self):
        params = _single(1.0)
        state = AdamState.create(params, ["x.al.weight"])
        adam_step(params, {"x.al.weight": np.ones((1, 1, 1, 1))}, state, lr=0.1)
        assert state.step == 1
        assert params["x.al.weight"].data.item() == pytest.approx(0.9, abs=1e-7)

    def test_adam_step_sign_follows_gradient(self):
        params = _single(1.0)
        state = AdamState.create(params, ["x.al.weight"])
        adam_step(params, {"x.al.weight": np.full((1, 1, 1, 1), -3.0)}, state, lr=0.01)
        assert params["x.al.weight"].data.item() == pytest.approx(1.01, abs=1e-7)

    def test_adam_missing_gradient(self):
        params = _single(1.0)
        state = AdamState.create(params, ["x.al.weight"])
        with pytest.raises(TrainingError):
            adam_step(params, {}, state, lr=0.1)


class TestPatches:
    def test_colocated_crops(self, rng):
        y = rng.integers(0, 256, (64, 64), dtype=np.uint8)
        c = rng.integers(0, 256, (32, 32), dtype=np.uint8)
        ps = extract_patches(y, c, count=5, seed=9, patch=8)
        assert len(ps) == 5
        assert ps.luma.shape == (5, 16, 16) and ps.chroma.shape == (5, 8, 8)
        for k, (r, col) in enumerate(ps.origins):
            np.testing.assert_array_equal(ps.chroma[k], c[r:r + 8, col:col + 8])
            np.testing.assert_array_equal(ps.luma[k], y[2 * r:2 * r + 16, 2 * col:2 * col + 16])

    def test_deterministic_for_seed(self, rng):
        y = rng.integers(0, 256, (64, 64), dtype=np.uint8)
        c = rng.integers(0, 256, (32, 32), dtype=np.uint8)
        a = extract_patches(y, c, 4, seed=(1, 2), patch=8)
        b = extract_patches(y, c, 4, seed=(1, 2), patch=8)
        np.testing.assert_array_equal(a.origins, b.origins)

    def test_patch_larger_than_plane(self, rng):
        with pytest.raises(ShapeError):
            extract_patches(np.zeros((16, 16), np.uint8), np.zeros((8, 8), np.uint8), 1, 0, patch=16)

    def test_tiles_cover_plane(self):
        tiles = tile_origins(40, 24, 16)
        assert sum(h * w for _, _, h, w in tiles) == 40 * 24
        assert tiles[0] == (0, 0, 16, 16)
        assert tiles[-1] == (32, 16, 8, 8)


class TestManifest:
    def test_parse(self, tmp_path):
        text = "# training set\nsynthetic:1:64x64 32\nimg/a.png\n\n"
        records = parse_manifest(text, base_dir=tmp_path, default_qp=27)
        assert records == [ManifestRecord("synthetic:1:64x64", 32), ManifestRecord(str(tmp_path / "img/a.png"), 27)]

    def test_bad_qp(self):
        with pytest.raises(ConfigError):
            parse_manifest("synthetic:1:64x64 60")

    def test_too_many_fields(self):
        with pytest.raises(ConfigError):
            parse_manifest("a.png 27 extra")


class TestDataset:
    def test_build_uses_both_chroma_planes(self):
        records = [ManifestRecord("synthetic:1:32x32", 32), ManifestRecord("synthetic:2:32x32", 37)]
        ds = build_dataset(records, patches_per_image=3, seed=0, patch=8)
        assert len(ds) == 2 * 2 * 3
        assert ds.luma.shape == (12, 1, 16, 16)
        assert ds.chroma.shape == ds.target.shape == (12, 1, 8, 8)
        assert 0.0 <= ds.chroma.min() and ds.chroma.max() <= 1.0

    def test_split(self):
        ds = build_dataset([ManifestRecord("synthetic:3:32x32", 32)], patches_per_image=5, seed=0, patch=8)
        train, hold = split_dataset(ds, 0.2, seed=1)
        assert len(train) + len(hold) == len(ds)
        assert len(hold) == 2

    def test_split_rejects_bad_fraction(self):
        ds = build_dataset([ManifestRecord("synthetic:3:32x32", 32)], patches_per_image=2, seed=0, patch=8)
        with pytest.raises(ConfigError):
            split_dataset(ds, 1.0, seed=0)

    def test_empty_dataset(self):
        with pytest.raises(TrainingError):
            build_dataset([], patches_per_image=2, seed=0)


class TestOffline:
    def test_one_epoch_updates_weights(self, tiny_config):
        ds = build_dataset([ManifestRecord("synthetic:4:32x32", 37)], patches_per_image=4, seed=0, patch=8)
        cfg = OfflineConfig(epochs=1, batch_size=4, lr=1e-3, luma_patch=16, chroma_patch=8)
        params = train_offline(ds, cfg, tiny_config)
        fresh = train_offline(ds, cfg.model_copy(update={"epochs": 0}), tiny_config)
        assert not np.array_equal(params["recon.tail.weight"].data, fresh["recon.tail.weight"].data)
        assert not any(t.requires_grad for t in params.tensors.values())
        assert np.isfinite(evaluate_dataset(params, ds, batch_size=3))

    def test_double_precision_training(self, tiny_config):
        ds = build_dataset([ManifestRecord("synthetic:4:32x32", 37)], patches_per_image=2, seed=0, patch=8)
        cfg = OfflineConfig(epochs=1, batch_size=4, lr=1e-3, luma_patch=16, chroma_patch=8)
        params = train_offline(ds, cfg, tiny_config, precision=Precision.DOUBLE)
        assert params.precision is Precision.DOUBLE

    def test_one_step_on_single_pair_reduces_loss(self, tiny_config):
        ds = build_dataset([ManifestRecord("synthetic:4:32x32", 37)], patches_per_image=1, seed=0, patch=8)
        single = ds.subset(np.array([0]))
        cfg = OfflineConfig(epochs=1, batch_size=1, lr=1e-3, luma_patch=16, chroma_patch=8)
        before = _dataset_loss(build_oldn(tiny_config, seed=cfg.seed), single)
        after = _dataset_loss(train_offline(single, cfg, tiny_config), single)
        assert after < before

    def test_same_seed_same_checkpoint_bytes(self, tiny_config, tmp_path):
        ds = build_dataset([ManifestRecord("synthetic:4:32x32", 37)], patches_per_image=3, seed=0, patch=8)
        cfg = OfflineConfig(epochs=2, batch_size=2, lr=1e-3, luma_patch=16, chroma_patch=8, seed=9)
        first = save_model(tmp_path / "a.oldn", train_offline(ds, cfg, tiny_config))
        second = save_model(tmp_path / "b.oldn", train_offline(ds, cfg, tiny_config))
        assert first.read_bytes() == second.read_bytes()

    @pytest.mark.slow
    def test_trained_model_beats_degraded_on_holdout(self, tiny_config):
        records = [ManifestRecord(f"synthetic:{k}:64x64", 47) for k in range(3)]
        ds = build_dataset(records, patches_per_image=16, seed=0, patch=8)
        train_set, holdout = split_dataset(ds, 0.25, seed=0)
        cfg = OfflineConfig(epochs=8, batch_size=8, lr=1e-3, luma_patch=16, chroma_patch=8)
        init = zero_convs(build_oldn(tiny_config, seed=cfg.seed), ["recon.tail"])
        assert evaluate_dataset(init, holdout) == 0.0
        params = train_offline(train_set, cfg, init=init)
        assert evaluate_dataset(params, holdout) > 0.0


class TestOnline:
    @pytest.fixture
    def frame(self, rgb_32):
        raw = rgb_to_yuv420(rgb_32)
        degraded, _ = degrade_frame(raw, QpConfig(37))
        return raw, degraded

    def test_zero_steps_keeps_baseline(self, tiny_model, frame):
        raw, degraded = frame
        cfg = OnlineConfig(steps=0)
        result = train_online_plane(tiny_model, degraded.y.samples, degraded.u.samples, raw.u.samples, cfg)
        np.testing.assert_array_equal(result.snapshot.values, tiny_model.snapshot().values)
        assert result.initial_loss == result.final_loss
        assert len(result.losses) == 1

    def test_training_only_touches_al_copy(self, tiny_model, frame, short_online):
        raw, degraded = frame
        before = {p: t.data.copy() for p, t in tiny_model.tensors.items()}
        result = train_online_plane(tiny_model, degraded.y.samples, degraded.v.samples, raw.v.samples, short_online)
        for p, data in before.items():
            np.testing.assert_array_equal(tiny_model[p].data, data)
        assert result.used_best or not np.array_equal(result.snapshot.values, tiny_model.snapshot().values)
        assert len(result.losses) == short_online.steps + 1

    def test_safeguard_never_returns_worse_than_initial(self, tiny_model, frame, short_online):
        raw, degraded = frame
        result = train_online_plane(tiny_model, degraded.y.samples, degraded.u.samples, raw.u.samples, short_online)
        assert result.best_loss == min(result.losses)
        assert result.best_loss <= result.initial_loss

    def test_snapshot_loss_follows_returned_snapshot(self, tiny_model, frame, short_online):
        raw, degraded = frame
        result = train_online_plane(tiny_model, degraded.y.samples, degraded.u.samples, raw.u.samples, short_online)
        expected = result.best_loss if result.used_best else result.losses[-1]
        assert result.snapshot_loss == expected

    def test_snapshot_loss_reports_best_when_final_is_worse(self, tiny_model, frame):
        raw, degraded = frame
        cfg = OnlineConfig(steps=3, lr=5.0)
        result = train_online_plane(tiny_model, degraded.y.samples, degraded.u.samples, raw.u.samples, cfg)
        assert result.used_best
        assert result.snapshot_loss == result.best_loss
        assert result.snapshot_loss <= result.initial_loss
        assert result.snapshot_loss != result.final_loss

    def test_tiled_training(self, tiny_model, frame):
        raw, degraded = frame
        cfg = OnlineConfig(steps=2, tile=8, tile_budget=64)
        result = train_online_plane(tiny_model, degraded.y.samples, degraded.u.samples, raw.u.samples, cfg)
        assert np.all(np.isfinite(result.losses))

    def test_frame_wrapper(self, tiny_model, frame, short_online):
        raw, degraded = frame
        snap = train_online(tiny_model, degraded, raw, short_online, plane="v")
        assert snap.paths == tuple(tiny_model.online_paths())
