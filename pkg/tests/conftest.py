from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from oldn.codec_sim import synthetic_image  # noqa: E402
from oldn.network import ModelParams, build_oldn  # noqa: E402
from oldn.settings import ModelConfig, OnlineConfig  # noqa: E402
from oldn.tensor_core import Precision  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_jsonl(monkeypatch):
    monkeypatch.delenv("OLDN_LOG_PATH", raising=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n=8, expand=2, cab_reduction=4, n_wb_branch=1, recon_blocks=["olwb", "wb"])


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> ModelParams:
    return build_oldn(tiny_config, seed=3)


@pytest.fixture
def tiny_model_double(tiny_config: ModelConfig) -> ModelParams:
    return build_oldn(tiny_config, seed=3, precision=Precision.DOUBLE)


@pytest.fixture
def rgb_32() -> np.ndarray:
    return synthetic_image(7, 32, 32)


@pytest.fixture
def rgb_64() -> np.ndarray:
    return synthetic_image(11, 64, 64)


@pytest.fixture
def short_online() -> OnlineConfig:
    return OnlineConfig(steps=3, lr=1e-2, tile=64, tile_budget=128 * 128)
