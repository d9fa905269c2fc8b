"""Typed configuration and the flat ``key = value`` config file format.

Nested models are addressed with a section prefix (``model.n = 16``,
``online.steps = 50``). List values are comma-separated. Defaults live in the
models themselves; ``oldn/config/defaults.conf`` documents them.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


PROJECT_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.environ.get("OLDN_DATA_DIR", PROJECT_DIR / "data"))
DEFAULT_CONFIG_PATH = Path(os.environ.get("OLDN_CONFIG", Path(__file__).resolve().parent / "config" / "defaults.conf"))

BlockKind = Literal["olwb", "wb"]
DEFAULT_QPS = [22, 27, 32, 37]


def _split_list(v: Any) -> Any:
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    return v


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    n: int = Field(64, ge=1)
    expand: int = Field(4, ge=1)
    cab_reduction: int = Field(4, ge=1)
    n_wb_branch: int = Field(2, ge=0)
    recon_blocks: List[BlockKind] = Field(default_factory=lambda: ["olwb", "wb", "olwb", "wb"])
    use_frequency: bool = True
    use_luma: bool = True

    @field_validator("recon_blocks", mode="before")
    @classmethod
    def _normalize_blocks(cls, v: Any) -> Any:
        v = _split_list(v)
        if isinstance(v, (list, tuple)):
            return [str(k).lower().replace("-", "").replace("_", "") for k in v]
        return v

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if "olwb" not in self.recon_blocks:
            raise ValueError("recon_blocks must contain at least one olwb block")
        if self.n % self.cab_reduction:
            raise ValueError(f"n={self.n} not divisible by cab_reduction={self.cab_reduction}")
        return self

    @property
    def olwb_count(self) -> int:
        return sum(1 for k in self.recon_blocks if k == "olwb")


class OfflineConfig(_Strict):
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    epochs: int = Field(20, ge=0)
    seed: int = 0
    luma_patch: int = Field(64, ge=16)
    chroma_patch: int = Field(32, ge=8)
    patches_per_image: int = Field(64, ge=1)
    qp: int = Field(27, ge=0, le=51)
    holdout_fraction: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self) -> "OfflineConfig":
        if self.luma_patch != 2 * self.chroma_patch:
            raise ValueError(f"luma patch {self.luma_patch} must be twice the chroma patch {self.chroma_patch}")
        if self.chroma_patch % 8:
            raise ValueError(f"chroma patch {self.chroma_patch} must be a multiple of 8")
        return self


class OnlineConfig(_Strict):
    steps: int = Field(100, ge=0)
    lr: float = Field(1e-2, gt=0)
    # chroma tile side; frames above tile_budget chroma pixels are trained tile by tile
    tile: int = Field(64, ge=8)
    tile_budget: int = Field(128 * 128, ge=64)

    @field_validator("tile")
    @classmethod
    def _tile_multiple(cls, v: int) -> int:
        if v % 8:
            raise ValueError(f"tile {v} must be a multiple of 8")
        return v


class ExperimentConfig(_Strict):
    images: List[str] = Field(default_factory=list)
    qps: List[int] = Field(default_factory=lambda: list(DEFAULT_QPS))
    checkpoint: Optional[str] = None
    online_enabled: bool = True
    prec: int = Field(8, ge=0, le=24)
    seed: int = 0
    workers: int = Field(1, ge=1)
    report: str = str(DATA_DIR / "report.csv")
    model: ModelConfig = Field(default_factory=ModelConfig)
    online: OnlineConfig = Field(default_factory=OnlineConfig)
    offline: OfflineConfig = Field(default_factory=OfflineConfig)

    @field_validator("images", "qps", mode="before")
    @classmethod
    def _lists(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("qps")
    @classmethod
    def _check_qps(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("QP set must not be empty")
        for qp in v:
            if not 0 <= qp <= 51:
                raise ValueError(f"QP {qp} outside [0, 51]")
        return v


# --- key = value files --------------------------------------------------------

def parse_kv_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}", line=lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key", line=lineno)
        out[key] = value.strip()
    return out


def load_kv_file(path: Path | str) -> Dict[str, str]:
    p = Path(path)
    try:
        return parse_kv_text(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}", path=str(p)) from e


def nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    """``{"model.n": "16"}`` -> ``{"model": {"n": "16"}}``."""
    out: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key {key!r} conflicts with scalar {part!r}")
            node = child
        node[parts[-1]] = value
    return out


M = TypeVar("M", bound=BaseModel)


def build_config(model_cls: Type[M], flat: Mapping[str, Any] | None = None, **overrides: Any) -> M:
    """Validate ``flat`` (dotted keys) plus non-None ``overrides`` into ``model_cls``."""
    data = nest(dict(flat or {}))
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"{model_cls.__name__}: {loc}: {first.get('msg')}", errors=e.error_count()) from e


def section(flat: Mapping[str, Any], prefix: str) -> Dict[str, Any]:
    """Sub-keys of ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in flat.items() if k.startswith(head)}
