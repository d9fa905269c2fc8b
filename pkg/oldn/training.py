"""Offline baseline training and encoder-side online fine-tuning of AL weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .codec_sim import (
    SYNTHETIC_PREFIX,
    QpConfig,
    Yuv420Frame,
    degrade_frame,
    load_rgb,
    pad_to_multiple,
    rgb_to_yuv420,
)
from .errors import ConfigError, ShapeError, TrainingError
from .logs import log_event
from .metrics import psnr
from .network import AlSnapshot, ModelParams, TrainMode, build_oldn, check_inputs, oldn_forward, to_uint8
from .settings import ModelConfig, OfflineConfig, OnlineConfig
from .tensor_core import Precision, Tape, Tensor4, apply_op, no_grad


# --- Loss ---------------------------------------------------------------------

def mse_loss(pred: Tensor4, target: Tensor4) -> Tensor4:
    """Mean squared error as a (1,1,1,1) tensor on the active tape."""
    if pred.dims != target.dims:
        raise ShapeError(f"mse_loss: prediction {pred.dims} vs target {target.dims}")
    if pred.data.dtype != target.data.dtype:
        target = Tensor4(target.data.astype(pred.data.dtype))
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype).reshape(1, 1, 1, 1)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        scale = g.reshape(()) * (2.0 / count)
        dp = (diff * scale).astype(diff.dtype) if needs[0] else None
        dt = (-diff * scale).astype(diff.dtype) if needs[1] else None
        return (dp, dt)

    return apply_op("mse_loss", [pred, target], out, grad_fn)


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParams, paths: Iterable[str]) -> "AdamState":
        m = {p: np.zeros(params[p].dims, dtype=np.float64) for p in paths}
        return cls(m=m, v={p: a.copy() for p, a in m.items()})

    @property
    def paths(self) -> List[str]:
        return sorted(self.m)


def adam_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of every path tracked by ``state``, in place."""
    missing = [p for p in state.paths if p not in grads]
    if missing:
        raise TrainingError(f"no gradient for {len(missing)} parameter(s), first {missing[0]!r}", missing=len(missing))
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for path in state.paths:
        g = np.asarray(grads[path], dtype=np.float64)
        tensor = params[path]
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient for {path} has shape {g.shape}, parameter {tensor.data.shape}")
        m = state.m[path] = state.beta1 * state.m[path] + (1.0 - state.beta1) * g
        v = state.v[path] = state.beta2 * state.v[path] + (1.0 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        tensor.data = (tensor.data.astype(np.float64) - update).astype(tensor.data.dtype)
    return params, state


def _grads(tape: Tape, params: ModelParams, paths: Sequence[str]) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for p in paths:
        t = params[p]
        out[p] = tape.grad(t) if tape.node_of(t) is not None else np.zeros(t.dims, dtype=t.data.dtype)
    return out


# --- Patches and datasets -------------------------------------------------------

@dataclass(frozen=True)
class PatchSet:
    origins: np.ndarray  # (count, 2) chroma (row, col)
    luma: np.ndarray  # (count, 2p, 2p) uint8
    chroma: np.ndarray  # (count, p, p) uint8

    def __len__(self) -> int:
        return int(self.origins.shape[0])


def crop_patches(plane: np.ndarray, origins: np.ndarray, size: int, scale: int = 1) -> np.ndarray:
    arr = np.asarray(plane)
    s = size * scale
    if not len(origins):
        return np.zeros((0, s, s), dtype=arr.dtype)
    return np.stack([arr[r * scale:r * scale + s, c * scale:c * scale + s] for r, c in origins])


def extract_patches(
    y_plane: np.ndarray,
    c_plane: np.ndarray,
    count: int,
    seed: int | Sequence[int],
    patch: int = 32,
) -> PatchSet:
    """Co-located pairs: chroma patch at (r, c) pairs with the luma patch at (2r, 2c), twice the size."""
    y, c = np.asarray(y_plane), np.asarray(c_plane)
    ch, cw = c.shape
    if y.shape != (2 * ch, 2 * cw):
        raise ShapeError(f"luma {y.shape} is not twice chroma {c.shape}")
    if ch < patch or cw < patch:
        raise ShapeError(f"chroma plane {ch}x{cw} smaller than patch {patch}")
    if count < 0:
        raise TrainingError(f"negative patch count {count}")
    rng = np.random.default_rng(seed)
    origins = np.stack(
        [rng.integers(0, ch - patch + 1, size=count), rng.integers(0, cw - patch + 1, size=count)], axis=1
    ).astype(np.int64)
    return PatchSet(origins, crop_patches(y, origins, patch, 2), crop_patches(c, origins, patch))


@dataclass
class PatchDataset:
    """Normalized [0, 1] float tensors, batch-first with one channel."""

    luma: np.ndarray  # (N, 1, 2p, 2p) degraded
    chroma: np.ndarray  # (N, 1, p, p) degraded
    target: np.ndarray  # (N, 1, p, p) raw

    def __len__(self) -> int:
        return int(self.chroma.shape[0])

    def subset(self, idx: np.ndarray) -> "PatchDataset":
        return PatchDataset(self.luma[idx], self.chroma[idx], self.target[idx])

    def batch(self, idx: np.ndarray, precision: Precision) -> Tuple[Tensor4, Tensor4, Tensor4]:
        dt = precision.dtype
        return (
            Tensor4(self.luma[idx].astype(dt)),
            Tensor4(self.chroma[idx].astype(dt)),
            Tensor4(self.target[idx].astype(dt)),
        )


@dataclass(frozen=True)
class ManifestRecord:
    source: str  # file path or synthetic:SEED:WxH
    qp: int


def parse_manifest(text: str, *, base_dir: Path | None = None, default_qp: int = 27) -> List[ManifestRecord]:
    """One record per line, ``SOURCE [QP]``; ``#`` starts a comment."""
    records: List[ManifestRecord] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 2:
            raise ConfigError(f"manifest line {lineno}: expected 'path [qp]', got {raw!r}", line=lineno)
        source = parts[0]
        if base_dir is not None and not source.startswith(SYNTHETIC_PREFIX) and not Path(source).is_absolute():
            source = str(base_dir / source)
        try:
            qp = int(parts[1]) if len(parts) == 2 else default_qp
        except ValueError as e:
            raise ConfigError(f"manifest line {lineno}: bad QP {parts[1]!r}", line=lineno) from e
        QpConfig(qp)
        records.append(ManifestRecord(source, qp))
    return records


def load_manifest(path: Path | str, default_qp: int = 27) -> List[ManifestRecord]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read manifest {p}: {e}", path=str(p)) from e
    return parse_manifest(text, base_dir=p.parent, default_qp=default_qp)


def _frames(rgb: np.ndarray, qp: int) -> Tuple[Yuv420Frame, Yuv420Frame]:
    raw = rgb_to_yuv420(pad_to_multiple(rgb, 2))
    degraded, _ = degrade_frame(raw, QpConfig(qp))
    return raw, degraded


def _normalized(parts: List[np.ndarray]) -> np.ndarray:
    return (np.concatenate(parts).astype(np.float32) / np.float32(255.0))[:, None]


def build_dataset(
    records: Sequence[ManifestRecord],
    patches_per_image: int,
    seed: int,
    patch: int = 32,
) -> PatchDataset:
    """Degrade each source at its QP; sample co-located patches from both U and V."""
    lumas: List[np.ndarray] = []
    chromas: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    for i, rec in enumerate(records):
        raw, degraded = _frames(load_rgb(rec.source), rec.qp)
        for k, name in enumerate(("u", "v")):
            ps = extract_patches(degraded.y.samples, degraded.chroma(name).samples, patches_per_image, (seed, i, k), patch)
            lumas.append(ps.luma)
            chromas.append(ps.chroma)
            targets.append(crop_patches(raw.chroma(name).samples, ps.origins, patch))
    if not lumas:
        raise TrainingError("dataset is empty")
    ds = PatchDataset(_normalized(lumas), _normalized(chromas), _normalized(targets))
    log_event("train", "dataset built", images=len(records), pairs=len(ds))
    return ds


def split_dataset(ds: PatchDataset, holdout_fraction: float, seed: int) -> Tuple[PatchDataset, PatchDataset]:
    if not 0.0 <= holdout_fraction < 1.0:
        raise ConfigError(f"holdout fraction {holdout_fraction} outside [0, 1)")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(n * holdout_fraction))
    if holdout_fraction > 0 and n > 1:
        n_hold = min(max(n_hold, 1), n - 1)
    return ds.subset(np.sort(order[n_hold:])), ds.subset(np.sort(order[:n_hold]))


def evaluate_dataset(params: ModelParams, ds: PatchDataset, batch_size: int = 64) -> float:
    """Mean per-patch PSNR gain (dB) of enhanced over degraded chroma, both against raw."""
    if len(ds) == 0:
        raise TrainingError("cannot evaluate an empty dataset")
    gains: List[float] = []
    prec = params.precision
    with no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            y, c, _ = ds.batch(idx, prec)
            out = to_uint8(oldn_forward(params, y, c).data)
            for j, k in enumerate(idx):
                raw = to_uint8(ds.target[k, 0])
                deg = to_uint8(ds.chroma[k, 0])
                gains.append(psnr(out[j, 0], raw) - psnr(deg, raw))
    return float(np.mean(gains))


# --- Offline --------------------------------------------------------------------

def train_offline(
    dataset: PatchDataset,
    config: OfflineConfig,
    model: Optional[ModelConfig] = None,
    *,
    precision: Precision = Precision.SINGLE,
    init: Optional[ModelParams] = None,
) -> ModelParams:
    """Adam over every parameter; logs the mean loss of each epoch."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    params = init.astype(precision) if init is not None else build_oldn(model or ModelConfig(), seed=config.seed, precision=precision)
    trainable = params.set_trainable(TrainMode.OFFLINE)
    state = AdamState.create(params, trainable)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                y, c, target = dataset.batch(idx, precision)
                with Tape() as tape:
                    loss = mse_loss(oldn_forward(params, y, c), target)
                    tape.backward(loss)
                value = float(loss.data.reshape(()))
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
                adam_step(params, _grads(tape, params, trainable), state, config.lr)
                total += value * idx.size
            log_event("train", "epoch", epoch=epoch + 1, epochs=config.epochs, loss=total / n)
    finally:
        params.set_trainable(TrainMode.NONE)
    return params


# --- Online ---------------------------------------------------------------------

@dataclass
class OnlineResult:
    snapshot: AlSnapshot
    initial_loss: float
    final_loss: float
    best_loss: float
    snapshot_loss: float  # loss of the returned snapshot: best_loss if used_best, else final_loss
    steps: int
    used_best: bool = False
    losses: List[float] = field(default_factory=list)


def tile_origins(height: int, width: int, tile: int) -> List[Tuple[int, int, int, int]]:
    """Raster-order (row, col, h, w) chroma tiles; edge tiles are clipped."""
    return [
        (r, c, min(tile, height - r), min(tile, width - c))
        for r in range(0, height, tile)
        for c in range(0, width, tile)
    ]


def _online_view(baseline: ModelParams) -> ModelParams:
    """Private AL copies marked trainable; frozen arrays shared, never tracked."""
    tensors = {}
    for path, t in baseline.tensors.items():
        if baseline.partition(path) == "online":
            tensors[path] = Tensor4(t.data.copy(), requires_grad=True)
        else:
            tensors[path] = Tensor4(t.data)
    return ModelParams(baseline.config, tensors)


def _frame_loss(
    params: ModelParams,
    paths: Sequence[str],
    y: np.ndarray,
    c: np.ndarray,
    raw: np.ndarray,
    tiles: Sequence[Tuple[int, int, int, int]],
) -> Tuple[float, Dict[str, np.ndarray]]:
    total = c.size
    loss_sum = 0.0
    grads = {p: np.zeros(params[p].dims, dtype=np.float64) for p in paths}
    for r, col, th, tw in tiles:
        yt = Tensor4(y[None, None, 2 * r:2 * (r + th), 2 * col:2 * (col + tw)])
        ct = Tensor4(c[None, None, r:r + th, col:col + tw])
        rt = Tensor4(raw[None, None, r:r + th, col:col + tw])
        weight = (th * tw) / total
        with Tape() as tape:
            loss = mse_loss(oldn_forward(params, yt, ct), rt)
            tape.backward(loss)
        loss_sum += weight * float(loss.data.reshape(()))
        for p, g in _grads(tape, params, paths).items():
            grads[p] += weight * g
    return loss_sum, grads


def train_online_plane(
    baseline: ModelParams,
    y_degraded: np.ndarray,
    c_degraded: np.ndarray,
    c_raw: np.ndarray,
    config: OnlineConfig,
) -> OnlineResult:
    """Fit the AL weights to one chroma plane; ``baseline`` is not modified."""
    dt = baseline.precision.dtype
    y = np.asarray(y_degraded, dtype=dt) / dt.type(255.0)
    c = np.asarray(c_degraded, dtype=dt) / dt.type(255.0)
    raw = np.asarray(c_raw, dtype=dt) / dt.type(255.0)
    if raw.shape != c.shape:
        raise ShapeError(f"raw chroma {raw.shape} vs degraded {c.shape}")
    check_inputs(Tensor4(y[None, None]), Tensor4(c[None, None]))

    h, w = c.shape
    tiles = tile_origins(h, w, config.tile) if h * w > config.tile_budget else [(0, 0, h, w)]
    work = _online_view(baseline)
    paths = work.online_paths()
    state = AdamState.create(work, paths)

    losses: List[float] = []
    best_loss, best = float("inf"), work.snapshot()
    for step in range(config.steps + 1):
        loss, grads = _frame_loss(work, paths, y, c, raw, tiles)
        losses.append(loss)
        if not np.isfinite(loss):
            log_event("online", "non-finite loss, stopping", step=step)
            break
        if loss < best_loss:
            best_loss, best = loss, work.snapshot()
        if step == config.steps:
            break
        adam_step(work, grads, state, config.lr)

    initial, final = losses[0], losses[-1]
    used_best = not (final <= initial)
    snapshot = best if used_best else work.snapshot()
    if used_best:
        log_event("online", "final loss above initial, keeping best snapshot", initial=initial, final=final, best=best_loss)
    log_event("online", "done", steps=config.steps, tiles=len(tiles), initial=initial, final=final, best=best_loss)
    snapshot_loss = best_loss if used_best else final
    return OnlineResult(snapshot, initial, final, best_loss, snapshot_loss, config.steps, used_best, losses)


def train_online(
    baseline: ModelParams,
    degraded: Yuv420Frame,
    raw: Yuv420Frame,
    config: OnlineConfig,
    plane: str = "u",
) -> AlSnapshot:
    return train_online_plane(
        baseline, degraded.y.samples, degraded.chroma(plane).samples, raw.chroma(plane).samples, config
    ).snapshot

