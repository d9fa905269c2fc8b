"""OL-DN graph: wide blocks, channel attention, adaptive layers, dual-domain topology.

Parameters live in a flat ``path -> Tensor4`` map. Paths ending in ``.al.weight``
are the online (adaptive-layer) subset; everything else is frozen after offline
training. Every tensor is 4-D so checkpoints store one uniform record type:
conv kernels (Cout, Cin, k, k), dense matrices (Cout, Cin, 1, 1), biases and AL
weights (1, C, 1, 1).

Topology, for chroma (B,1,H,W) and luma (B,1,2H,2W):

  spatial   chroma -> unshuffle 2 -> conv -> WBs  (+)  luma -> unshuffle 4 -> conv -> WBs
  frequency chroma -> DCT -> conv -> WBs  (+)  luma -> avgpool 2 -> DCT -> conv -> WBs
            -> conv to 16n -> shuffle 4
  fusion    concat(spatial, frequency) -> conv -> recon blocks -> conv to 4 -> shuffle 2 -> + chroma
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import CheckpointError, ShapeError
from .freq_transform import dct_conv
from .settings import ModelConfig
from .tensor_core import (
    Precision,
    Tensor4,
    add,
    avg_pool2,
    channel_scale,
    concat_channels,
    conv2d,
    dense,
    gate_channels,
    global_avg_pool,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    sigmoid,
)


AL_SUFFIX = ".al.weight"


class TrainMode(str, Enum):
    NONE = "none"
    OFFLINE = "offline"  # every parameter
    ONLINE = "online"  # adaptive-layer weights only


@dataclass(frozen=True)
class AlSnapshot:
    """All AL weights flattened in sorted parameter-path order."""

    paths: Tuple[str, ...]
    sizes: Tuple[int, ...]
    values: np.ndarray  # float64

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, Tensor4]

    def __getitem__(self, path: str) -> Tensor4:
        return self.tensors[path]

    def paths(self) -> List[str]:
        return sorted(self.tensors)

    def online_paths(self) -> List[str]:
        return [p for p in self.paths() if p.endswith(AL_SUFFIX)]

    def frozen_paths(self) -> List[str]:
        return [p for p in self.paths() if not p.endswith(AL_SUFFIX)]

    def partition(self, path: str) -> str:
        return "online" if path.endswith(AL_SUFFIX) else "frozen"

    @property
    def online_count(self) -> int:
        return sum(self.tensors[p].data.size for p in self.online_paths())

    @property
    def precision(self) -> Precision:
        return next(iter(self.tensors.values())).precision

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {p: Tensor4(t.data.copy()) for p, t in self.tensors.items()})

    def astype(self, precision: Precision) -> "ModelParams":
        return ModelParams(self.config, {p: Tensor4(t.data.astype(precision.dtype)) for p, t in self.tensors.items()})

    def set_trainable(self, mode: TrainMode) -> List[str]:
        """Flag parameters for differentiation; returns the trainable paths."""
        trainable: List[str] = []
        for p in self.paths():
            on = mode is TrainMode.OFFLINE or (mode is TrainMode.ONLINE and p.endswith(AL_SUFFIX))
            self.tensors[p].requires_grad = on
            if on:
                trainable.append(p)
        return trainable

    def snapshot(self) -> AlSnapshot:
        paths = tuple(self.online_paths())
        sizes = tuple(int(self.tensors[p].data.size) for p in paths)
        values = np.concatenate([self.tensors[p].data.ravel().astype(np.float64) for p in paths])
        return AlSnapshot(paths, sizes, values)

    def with_snapshot(self, snap: AlSnapshot) -> "ModelParams":
        """Copy with AL weights replaced (cast to the working precision); frozen tensors shared."""
        if tuple(self.online_paths()) != snap.paths:
            raise ShapeError("snapshot paths do not match model", expected=len(self.online_paths()), got=len(snap.paths))
        tensors = dict(self.tensors)
        offset = 0
        for path, size in zip(snap.paths, snap.sizes):
            cur = self.tensors[path]
            chunk = snap.values[offset:offset + size].astype(cur.data.dtype).reshape(cur.dims)
            tensors[path] = Tensor4(chunk)
            offset += size
        return ModelParams(self.config, tensors)


def parameter_count(params: ModelParams, prefix: str) -> int:
    head = prefix + "."
    return sum(t.data.size for p, t in params.tensors.items() if p.startswith(head))


# --- Construction -----------------------------------------------------------

class _Builder:
    def __init__(self, seed: int, precision: Precision) -> None:
        self.rng = np.random.default_rng(seed)
        self.dtype = precision.dtype
        self.tensors: Dict[str, Tensor4] = {}

    def conv(self, path: str, cin: int, cout: int, k: int = 3) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        self.tensors[f"{path}.weight"] = Tensor4(self.rng.uniform(-bound, bound, (cout, cin, k, k)).astype(self.dtype))
        self.tensors[f"{path}.bias"] = Tensor4(np.zeros((1, cout, 1, 1), dtype=self.dtype))

    def fc(self, path: str, cin: int, cout: int) -> None:
        self.conv(path, cin, cout, k=1)

    def block(self, path: str, cfg: ModelConfig, kind: str) -> None:
        n, wide = cfg.n, cfg.n * cfg.expand
        self.conv(f"{path}.conv1", n, wide)
        self.conv(f"{path}.conv2", wide, n)
        if kind == "olwb":
            self.tensors[f"{path}{AL_SUFFIX}"] = Tensor4(np.ones((1, n, 1, 1), dtype=self.dtype))
        else:
            hidden = n // cfg.cab_reduction
            self.fc(f"{path}.cab.fc1", n, hidden)
            self.fc(f"{path}.cab.fc2", hidden, n)


def build_oldn(config: ModelConfig, seed: int = 0, precision: Precision = Precision.SINGLE) -> ModelParams:
    """He-uniform convs and dense layers, zero biases, AL weights at 1.0."""
    cfg = ModelConfig.model_validate(config.model_dump())
    n = cfg.n
    b = _Builder(seed, precision)

    b.conv("spatial.chroma.head", 4, n)
    for i in range(cfg.n_wb_branch):
        b.block(f"spatial.chroma.wb{i}", cfg, "wb")
    if cfg.use_luma:
        b.conv("spatial.luma.head", 16, n)
        for i in range(cfg.n_wb_branch):
            b.block(f"spatial.luma.wb{i}", cfg, "wb")
    if cfg.use_frequency:
        b.conv("freq.chroma.head", 64, n)
        for i in range(cfg.n_wb_branch):
            b.block(f"freq.chroma.wb{i}", cfg, "wb")
        if cfg.use_luma:
            b.conv("freq.luma.head", 64, n)
            for i in range(cfg.n_wb_branch):
                b.block(f"freq.luma.wb{i}", cfg, "wb")
        b.conv("freq.tail", n, 16 * n)
    b.conv("fusion", 2 * n if cfg.use_frequency else n, n)
    for i, kind in enumerate(cfg.recon_blocks):
        b.block(f"recon.b{i}", cfg, kind)
    b.conv("recon.tail", n, 4)
    return ModelParams(cfg, b.tensors)


def infer_config(tensors: Mapping[str, Tensor4]) -> ModelConfig:
    """Recover the :class:`ModelConfig` a parameter set was built from."""
    try:
        n = tensors["fusion.weight"].dims[0]
        expand = tensors["recon.b0.conv1.weight"].dims[0] // n
    except KeyError as e:
        raise CheckpointError(f"parameter set lacks {e.args[0]}") from e
    blocks: List[str] = []
    while f"recon.b{len(blocks)}.conv1.weight" in tensors:
        blocks.append("olwb" if f"recon.b{len(blocks)}{AL_SUFFIX}" in tensors else "wb")
    n_branch = 0
    while f"spatial.chroma.wb{n_branch}.conv1.weight" in tensors:
        n_branch += 1
    hidden = next((t.dims[0] for p, t in sorted(tensors.items()) if p.endswith(".cab.fc1.weight")), None)
    reduction = n // hidden if hidden else (4 if n % 4 == 0 else 1)
    try:
        return ModelConfig(
            n=n,
            expand=expand,
            cab_reduction=reduction,
            n_wb_branch=n_branch,
            recon_blocks=blocks,
            use_frequency="freq.tail.weight" in tensors,
            use_luma="spatial.luma.head.weight" in tensors,
        )
    except ValidationError as e:
        raise CheckpointError(f"parameter set does not describe a valid model: {e.errors()[0].get('msg')}") from e


# --- Forward ----------------------------------------------------------------

def _conv3(x: Tensor4, params: ModelParams, path: str) -> Tensor4:
    return conv2d(x, params[f"{path}.weight"], params[f"{path}.bias"], stride=1, pad=1)


def cab_forward(x: Tensor4, params: ModelParams, prefix: str) -> Tensor4:
    """Channel attention: pool -> fc -> relu -> fc -> sigmoid -> rescale channels."""
    c = x.dims[1]
    fc1 = params[f"{prefix}.fc1.weight"]
    if fc1.dims[1] != c or c % params.config.cab_reduction:
        raise ShapeError(f"CAB {prefix}: input has {c} channels, layer expects {fc1.dims[1]}")
    v = global_avg_pool(x)
    v = relu(dense(v, fc1, params[f"{prefix}.fc1.bias"]))
    s = sigmoid(dense(v, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]))
    return gate_channels(x, s)


def adaptive_layer_forward(x: Tensor4, w: Tensor4) -> Tensor4:
    return channel_scale(x, w)


def _wide_branch(x: Tensor4, params: ModelParams, prefix: str) -> Tensor4:
    n = params.config.n
    if x.dims[1] != n:
        raise ShapeError(f"block {prefix}: input has {x.dims[1]} channels, expected {n}")
    return _conv3(relu(_conv3(x, params, f"{prefix}.conv1")), params, f"{prefix}.conv2")


def wide_block_forward(x: Tensor4, params: ModelParams, prefix: str) -> Tensor4:
    """y = x + CAB(conv_n(ReLU(conv_{n*expand}(x))))."""
    return add(x, cab_forward(_wide_branch(x, params, prefix), params, f"{prefix}.cab"))


def olwb_forward(x: Tensor4, params: ModelParams, prefix: str) -> Tensor4:
    """Wide block with the adaptive layer in place of channel attention."""
    return add(x, adaptive_layer_forward(_wide_branch(x, params, prefix), params[f"{prefix}{AL_SUFFIX}"]))


def _branch(x: Tensor4, params: ModelParams, prefix: str) -> Tensor4:
    h = _conv3(x, params, f"{prefix}.head")
    for i in range(params.config.n_wb_branch):
        h = wide_block_forward(h, params, f"{prefix}.wb{i}")
    return h


def check_inputs(y_luma: Tensor4, chroma: Tensor4) -> None:
    bsz, c, h, w = chroma.dims
    if c != 1 or y_luma.dims[1] != 1:
        raise ShapeError(f"expected single-channel planes, got chroma {chroma.dims}, luma {y_luma.dims}")
    if h % 8 or w % 8:
        raise ShapeError(f"chroma extent {h}x{w} must be divisible by 8")
    if y_luma.dims != (bsz, 1, 2 * h, 2 * w):
        raise ShapeError(f"luma {y_luma.dims} must be exactly twice chroma {chroma.dims} (4:2:0)")


def oldn_forward(params: ModelParams, y_luma: Tensor4, chroma: Tensor4) -> Tensor4:
    """Enhanced chroma with the same shape as ``chroma`` (unclamped)."""
    check_inputs(y_luma, chroma)
    cfg = params.config

    spatial = _branch(pixel_unshuffle(chroma, 2), params, "spatial.chroma")
    if cfg.use_luma:
        spatial = add(spatial, _branch(pixel_unshuffle(y_luma, 4), params, "spatial.luma"))

    fused = spatial
    if cfg.use_frequency:
        freq = _branch(dct_conv(chroma), params, "freq.chroma")
        if cfg.use_luma:
            freq = add(freq, _branch(dct_conv(avg_pool2(y_luma)), params, "freq.luma"))
        freq = pixel_shuffle(_conv3(freq, params, "freq.tail"), 4)
        fused = concat_channels(spatial, freq)

    h = _conv3(fused, params, "fusion")
    for i, kind in enumerate(cfg.recon_blocks):
        block = olwb_forward if kind == "olwb" else wide_block_forward
        h = block(h, params, f"recon.b{i}")
    residual = pixel_shuffle(_conv3(h, params, "recon.tail"), 2)
    return add(residual, chroma)


def enhance_plane(params: ModelParams, y_luma: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    """8-bit planes in, 8-bit enhanced chroma out (normalization and final clamp)."""
    dtype = params.precision.dtype
    y = Tensor4((np.asarray(y_luma, dtype=dtype) / 255.0)[None, None])
    c = Tensor4((np.asarray(chroma, dtype=dtype) / 255.0)[None, None])
    out = oldn_forward(params, y, c).data[0, 0]
    return to_uint8(out)


def to_uint8(normalized: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(normalized.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def zero_convs(params: ModelParams, prefixes: Optional[Sequence[str]] = None) -> ModelParams:
    """Copy with conv weights/biases zeroed (all, or under ``prefixes``)."""
    out = params.clone()
    for path, t in out.tensors.items():
        if ".conv" not in path and not path.endswith((".head.weight", ".head.bias", "tail.weight", "tail.bias", "fusion.weight", "fusion.bias")):
            continue
        if prefixes is not None and not any(path.startswith(p) for p in prefixes):
            continue
        t.data[...] = 0
    return out


def params_from_arrays(arrays: Mapping[str, np.ndarray], precision: Precision = Precision.SINGLE) -> ModelParams:
    """Rebuild a parameter set from named arrays; names and shapes must match the inferred topology."""
    tensors = {name: Tensor4(np.asarray(a, dtype=precision.dtype)) for name, a in arrays.items()}
    config = infer_config(tensors)
    reference = build_oldn(config, seed=0, precision=precision)
    missing = sorted(set(reference.tensors) - set(tensors))
    extra = sorted(set(tensors) - set(reference.tensors))
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match the inferred model ({len(missing)} missing, {len(extra)} unexpected)",
            first_missing=missing[0] if missing else None,
            first_extra=extra[0] if extra else None,
        )
    for name, ref in reference.tensors.items():
        if tensors[name].dims != ref.dims:
            raise CheckpointError(f"{name}: shape {tensors[name].dims}, expected {ref.dims}")
    return ModelParams(config, tensors)
