from __future__ import annotations

import numpy as np
import pytest

from oldn.errors import CheckpointError, ShapeError
from oldn.network import (
    AL_SUFFIX,
    TrainMode,
    build_oldn,
    cab_forward,
    enhance_plane,
    infer_config,
    olwb_forward,
    oldn_forward,
    parameter_count,
    params_from_arrays,
    wide_block_forward,
    zero_convs,
)
from oldn.settings import ModelConfig
from oldn.tensor_core import Tape, Tensor4
from oldn.training import mse_loss


def _inputs(rng, h=16, w=16, batch=1):
    luma = Tensor4(rng.uniform(0.0, 1.0, (batch, 1, 2 * h, 2 * w)).astype(np.float32))
    chroma = Tensor4(rng.uniform(0.0, 1.0, (batch, 1, h, w)).astype(np.float32))
    return luma, chroma


class TestConstruction:
    def test_default_model_has_128_online_weights(self):
        params = build_oldn(ModelConfig())
        assert params.online_count == 128
        assert params.online_paths() == ["recon.b0.al.weight", "recon.b2.al.weight"]

    def test_al_starts_at_one(self, tiny_model):
        for path in tiny_model.online_paths():
            np.testing.assert_array_equal(tiny_model[path].data, 1.0)

    def test_biases_start_at_zero(self, tiny_model):
        for path in tiny_model.paths():
            if path.endswith(".bias"):
                assert not tiny_model[path].data.any()

    def test_same_seed_same_weights(self, tiny_config):
        a, b = build_oldn(tiny_config, seed=5), build_oldn(tiny_config, seed=5)
        for path in a.paths():
            np.testing.assert_array_equal(a[path].data, b[path].data)

    def test_partition_is_exhaustive(self, tiny_model):
        online, frozen = set(tiny_model.online_paths()), set(tiny_model.frozen_paths())
        assert not online & frozen
        assert online | frozen == set(tiny_model.tensors)
        assert all(tiny_model.partition(p) == "online" for p in online)

    def test_olwb_is_smaller_than_wb(self, tiny_model):
        assert parameter_count(tiny_model, "recon.b0") < parameter_count(tiny_model, "recon.b1")

    def test_infer_config_round_trip(self, tiny_config, tiny_model):
        assert infer_config(tiny_model.tensors) == tiny_config

    @pytest.mark.parametrize("use_frequency,use_luma", [(False, True), (True, False), (False, False)])
    def test_ablation_variants(self, rng, tiny_config, use_frequency, use_luma):
        cfg = ModelConfig(**{**tiny_config.model_dump(), "use_frequency": use_frequency, "use_luma": use_luma})
        params = build_oldn(cfg, seed=1)
        assert any(p.startswith("freq.") for p in params.paths()) == use_frequency
        assert any(".luma." in p for p in params.paths()) == use_luma
        assert params["fusion.weight"].dims[1] == (2 * cfg.n if use_frequency else cfg.n)
        assert infer_config(params.tensors) == cfg
        luma, chroma = _inputs(rng)
        assert oldn_forward(params, luma, chroma).dims == chroma.dims


class TestForward:
    def test_output_shape(self, rng, tiny_model):
        luma, chroma = _inputs(rng, 16, 24, batch=2)
        assert oldn_forward(tiny_model, luma, chroma).dims == (2, 1, 16, 24)

    def test_zero_convs_gives_identity(self, rng, tiny_model):
        luma, chroma = _inputs(rng)
        out = oldn_forward(zero_convs(tiny_model), luma, chroma)
        np.testing.assert_array_equal(out.data, chroma.data)

    def test_zero_al_makes_olwb_identity(self, rng, tiny_model):
        params = tiny_model.clone()
        params.tensors["recon.b0" + AL_SUFFIX].data[...] = 0.0
        x = Tensor4(rng.standard_normal((1, 8, 4, 4)).astype(np.float32))
        np.testing.assert_array_equal(olwb_forward(x, params, "recon.b0").data, x.data)

    def test_wide_block_rejects_wrong_width(self, rng, tiny_model):
        x = Tensor4(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
        with pytest.raises(ShapeError):
            wide_block_forward(x, tiny_model, "recon.b1")

    def test_chroma_must_align_to_blocks(self, rng, tiny_model):
        luma, chroma = _inputs(rng, 12, 16)
        with pytest.raises(ShapeError):
            oldn_forward(tiny_model, luma, chroma)

    def test_luma_must_be_twice_chroma(self, rng, tiny_model):
        luma = Tensor4(np.zeros((1, 1, 16, 16), dtype=np.float32))
        chroma = Tensor4(np.zeros((1, 1, 16, 16), dtype=np.float32))
        with pytest.raises(ShapeError):
            oldn_forward(tiny_model, luma, chroma)

    def test_enhance_plane_is_uint8(self, rng, tiny_model):
        y = rng.integers(0, 256, (32, 32), dtype=np.uint8)
        c = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        out = enhance_plane(tiny_model, y, c)
        assert out.dtype == np.uint8 and out.shape == c.shape

    def test_enhance_plane_identity_model_returns_input(self, rng, tiny_model):
        y = rng.integers(0, 256, (32, 32), dtype=np.uint8)
        c = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        np.testing.assert_array_equal(enhance_plane(zero_convs(tiny_model), y, c), c)


class TestParams:
    def test_set_trainable_online(self, tiny_model):
        trainable = tiny_model.set_trainable(TrainMode.ONLINE)
        assert trainable == tiny_model.online_paths()
        assert not any(tiny_model[p].requires_grad for p in tiny_model.frozen_paths())
        tiny_model.set_trainable(TrainMode.NONE)
        assert not any(t.requires_grad for t in tiny_model.tensors.values())

    def test_with_snapshot_shares_frozen(self, tiny_model):
        snap = tiny_model.snapshot()
        assert len(snap) == tiny_model.online_count
        changed = type(snap)(snap.paths, snap.sizes, snap.values + 0.25)
        updated = tiny_model.with_snapshot(changed)
        for path in tiny_model.frozen_paths():
            assert updated[path] is tiny_model[path]
        np.testing.assert_allclose(updated.snapshot().values, 1.25)
        np.testing.assert_array_equal(tiny_model.snapshot().values, 1.0)

    def test_params_from_arrays_round_trip(self, tiny_model):
        arrays = {p: t.data for p, t in tiny_model.tensors.items()}
        rebuilt = params_from_arrays(arrays)
        assert rebuilt.config == tiny_model.config
        for p in tiny_model.paths():
            np.testing.assert_array_equal(rebuilt[p].data, tiny_model[p].data)

    def test_params_from_arrays_rejects_bad_shape(self, tiny_model):
        arrays = {p: t.data for p, t in tiny_model.tensors.items()}
        arrays["recon.tail.bias"] = np.zeros((1, 5, 1, 1), dtype=np.float32)
        with pytest.raises(CheckpointError):
            params_from_arrays(arrays)

    def test_params_from_arrays_rejects_missing(self, tiny_model):
        arrays = {p: t.data for p, t in tiny_model.tensors.items() if p != "recon.tail.bias"}
        with pytest.raises(CheckpointError):
            params_from_arrays(arrays)


def _force_gate(params, prefix: str, bias: float) -> None:
    """Makes the CAB gate the constant sigmoid(bias) for every channel."""
    params.tensors[f"{prefix}.fc2.weight"].data[...] = 0.0
    params.tensors[f"{prefix}.fc2.bias"].data[...] = bias


class TestBlockSemantics:
    def test_cab_with_open_gate_is_identity(self, rng, tiny_model_double):
        params = tiny_model_double.clone()
        _force_gate(params, "recon.b1.cab", 50.0)
        x = Tensor4(rng.standard_normal((2, 8, 4, 4)))
        np.testing.assert_allclose(cab_forward(x, params, "recon.b1.cab").data, x.data, rtol=1e-15)

    def test_cab_with_half_gate_halves_input(self, rng, tiny_model_double):
        params = tiny_model_double.clone()
        _force_gate(params, "recon.b1.cab", 0.0)
        x = Tensor4(rng.standard_normal((1, 8, 4, 4)))
        np.testing.assert_array_equal(cab_forward(x, params, "recon.b1.cab").data, 0.5 * x.data)

    def test_al_weight_touches_only_its_channel(self, rng, tiny_model_double):
        params = tiny_model_double.clone()
        x = Tensor4(rng.standard_normal((1, 8, 4, 4)))
        before = olwb_forward(x, params, "recon.b0").data
        params.tensors["recon.b0" + AL_SUFFIX].data[0, 3, 0, 0] = 1.7
        after = olwb_forward(x, params, "recon.b0").data
        changed = np.flatnonzero(np.any(before != after, axis=(0, 2, 3)))
        assert changed.tolist() == [3]

    def test_olwb_with_unit_al_equals_wb_with_open_gate(self, rng, tiny_model_double):
        params = tiny_model_double.clone()
        params.tensors["recon.b1" + AL_SUFFIX] = Tensor4(np.ones((1, 8, 1, 1)))
        _force_gate(params, "recon.b1.cab", 50.0)
        x = Tensor4(rng.standard_normal((1, 8, 4, 4)))
        np.testing.assert_allclose(
            olwb_forward(x, params, "recon.b1").data,
            wide_block_forward(x, params, "recon.b1").data,
            rtol=1e-12,
            atol=1e-12,
        )

    def test_online_mode_differentiates_only_al(self, rng, tiny_model):
        params = tiny_model.clone()
        params.set_trainable(TrainMode.ONLINE)
        luma, chroma = _inputs(rng)
        target = Tensor4(rng.uniform(0.0, 1.0, chroma.dims).astype(np.float32))
        with Tape() as tape:
            loss = mse_loss(oldn_forward(params, luma, chroma), target)
            tape.backward(loss)
        on_tape = [p for p in params.paths() if tape.node_of(params[p]) is not None]
        assert on_tape == params.online_paths()
        for path in on_tape:
            assert np.any(tape.grad(params[path]) != 0.0)
