"""Encoder -> side-information stream -> decoder simulation and the experiment runner.

Each chroma plane is online-trained on its own and gets its own residual
stream. The encoder measures quality with the quantized AL weights it actually
transmits, so the decoder output must match it bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .codec_sim import QpConfig, Yuv420Frame, degrade_frame, load_rgb, pad_to_multiple, rgb_to_yuv420
from .errors import MetricError, OldnError
from .logs import log_event
from .metrics import RdCurve, bd_rate, image_rate_bits, psnr
from .network import ModelParams, build_oldn, enhance_plane
from .param_codec import (
    AlResidualStream,
    ResidualSymbols,
    apply_residual,
    huffman_decode,
    huffman_encode,
    quantize_residual,
    stream_size_bits,
)
from .settings import ExperimentConfig, OnlineConfig
from .storage import load_model, write_report
from .tensor_core import no_grad
from .training import train_online_plane


CHROMA_PLANES = ("u", "v")
# chroma must be a multiple of the DCT block, so luma a multiple of 16
FRAME_ALIGN = 16


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


@dataclass
class PlaneResult:
    plane: str
    degraded_psnr: float
    baseline_psnr: float
    enhanced_psnr: float
    side_bits: int
    nonzero_symbols: int
    parity_ok: bool
    guard_fallback: bool = False
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None


@dataclass
class RoundtripReport:
    qp: int
    image_bits: float
    planes: Dict[str, PlaneResult]
    streams: Dict[str, bytes] = field(default_factory=dict, repr=False)
    enhanced: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def side_bits(self) -> int:
        return sum(p.side_bits for p in self.planes.values())

    @property
    def parity_ok(self) -> bool:
        return all(p.parity_ok for p in self.planes.values())

    @property
    def baseline_psnr(self) -> float:
        return float(np.mean([p.baseline_psnr for p in self.planes.values()]))

    @property
    def enhanced_psnr(self) -> float:
        return float(np.mean([p.enhanced_psnr for p in self.planes.values()]))

    @property
    def degraded_psnr(self) -> float:
        return float(np.mean([p.degraded_psnr for p in self.planes.values()]))

    def as_dict(self) -> Dict[str, Any]:
        return {
            "qp": self.qp,
            "image_bits": self.image_bits,
            "side_bits": self.side_bits,
            "degraded_psnr": self.degraded_psnr,
            "baseline_psnr": self.baseline_psnr,
            "enhanced_psnr": self.enhanced_psnr,
            "parity_ok": self.parity_ok,
            "planes": {k: asdict(v) for k, v in self.planes.items()},
        }


@dataclass
class EncodedPlane:
    symbols: ResidualSymbols
    stream: AlResidualStream
    enhanced: np.ndarray  # encoder-side output with the quantized AL
    guard_fallback: bool
    initial_loss: Optional[float]
    final_loss: Optional[float]  # loss of the snapshot that was quantized


def encode_plane(
    model: ModelParams,
    y_degraded: np.ndarray,
    c_degraded: np.ndarray,
    c_raw: np.ndarray,
    online: OnlineConfig,
    *,
    prec: int,
    online_enabled: bool = True,
    baseline_out: Optional[np.ndarray] = None,
    region: Optional[Tuple[int, int]] = None,
) -> EncodedPlane:
    """Online-train, quantize and entropy-code one chroma plane's AL residual.

    Falls back to the all-zero residual when the quantized model does worse on
    the frame than the baseline. ``region`` limits that comparison to the top-left
    (rows, cols) of the plane, i.e. the area before padding.
    """
    base_snap = model.snapshot()
    if baseline_out is None:
        with no_grad():
            baseline_out = enhance_plane(model, y_degraded, c_degraded)
    zero = ResidualSymbols.zeros(len(base_snap), prec)
    if not online_enabled or online.steps == 0:
        return EncodedPlane(zero, huffman_encode(zero), baseline_out, False, None, None)

    result = train_online_plane(model, y_degraded, c_degraded, c_raw, online)
    symbols = quantize_residual(result.snapshot, base_snap, prec)
    with no_grad():
        enhanced = enhance_plane(apply_residual(model, symbols), y_degraded, c_degraded)
    rows, cols = region or c_raw.shape
    crop = (slice(0, rows), slice(0, cols))
    fallback = _mse(enhanced[crop], c_raw[crop]) > _mse(baseline_out[crop], c_raw[crop])
    if fallback:
        log_event("encode", "quantized AL worse than baseline, sending zero residual", nonzero=symbols.nonzero)
        symbols, enhanced = zero, baseline_out
    return EncodedPlane(symbols, huffman_encode(symbols), enhanced, fallback, result.initial_loss, result.snapshot_loss)


def decode_plane(model: ModelParams, stream: AlResidualStream | bytes, y_degraded: np.ndarray, c_degraded: np.ndarray) -> np.ndarray:
    symbols = huffman_decode(stream)
    with no_grad():
        return enhance_plane(apply_residual(model, symbols), y_degraded, c_degraded)


def prepare_frames(rgb: np.ndarray, qp: int) -> Tuple[Yuv420Frame, Yuv420Frame, float, Tuple[int, int]]:
    """Raw and degraded 4:2:0 frames of the edge-padded image, its rate proxy, and the chroma crop."""
    h, w = np.asarray(rgb).shape[:2]
    raw = rgb_to_yuv420(pad_to_multiple(rgb, FRAME_ALIGN))
    degraded, levels = degrade_frame(raw, QpConfig(qp))
    return raw, degraded, image_rate_bits(levels), ((h + 1) // 2, (w + 1) // 2)


def simulate_roundtrip(
    rgb: np.ndarray,
    qp: int,
    model: ModelParams,
    online: OnlineConfig,
    *,
    prec: int = 8,
    online_enabled: bool = True,
) -> RoundtripReport:
    raw, degraded, image_bits, (ch, cw) = prepare_frames(rgb, qp)
    y_deg = degraded.y.samples
    planes: Dict[str, PlaneResult] = {}
    streams: Dict[str, bytes] = {}
    outputs: Dict[str, np.ndarray] = {}
    for name in CHROMA_PLANES:
        c_deg = degraded.chroma(name).samples
        c_raw = raw.chroma(name).samples
        with no_grad():
            base_out = enhance_plane(model, y_deg, c_deg)
        enc = encode_plane(
            model, y_deg, c_deg, c_raw, online, prec=prec, online_enabled=online_enabled,
            baseline_out=base_out, region=(ch, cw),
        )
        data = enc.stream.to_bytes()

        dec_out = decode_plane(model, data, y_deg, c_deg)
        crop = (slice(0, ch), slice(0, cw))
        planes[name] = PlaneResult(
            plane=name,
            degraded_psnr=psnr(c_deg[crop], c_raw[crop]),
            baseline_psnr=psnr(base_out[crop], c_raw[crop]),
            enhanced_psnr=psnr(dec_out[crop], c_raw[crop]),
            side_bits=stream_size_bits(enc.stream),
            nonzero_symbols=enc.symbols.nonzero,
            parity_ok=bool(np.array_equal(dec_out, enc.enhanced)),
            guard_fallback=enc.guard_fallback,
            initial_loss=enc.initial_loss,
            final_loss=enc.final_loss,
        )
        streams[name] = data
        outputs[name] = dec_out[crop]
        if not planes[name].parity_ok:
            log_event("simulate", "encoder/decoder mismatch", plane=name, qp=qp)
    return RoundtripReport(qp=qp, image_bits=image_bits, planes=planes, streams=streams, enhanced=outputs)


# --- Experiment ---------------------------------------------------------------

REPORT_COLUMNS = [
    "image",
    "qp",
    "status",
    "image_bits",
    "side_bits",
    "degraded_psnr_u",
    "baseline_psnr_u",
    "online_psnr_u",
    "degraded_psnr_v",
    "baseline_psnr_v",
    "online_psnr_v",
    "parity_ok",
    "detail",
]


def _row(image: str, qp: int, report: Optional[RoundtripReport] = None, error: Optional[OldnError] = None) -> Dict[str, Any]:
    row: Dict[str, Any] = {"image": image, "qp": qp}
    if error is not None:
        row.update(status=error.code, detail=error.detail)
        return row
    assert report is not None
    row.update(status="ok", image_bits=report.image_bits, side_bits=report.side_bits, parity_ok=report.parity_ok)
    for name, p in report.planes.items():
        row[f"degraded_psnr_{name}"] = p.degraded_psnr
        row[f"baseline_psnr_{name}"] = p.baseline_psnr
        row[f"online_psnr_{name}"] = p.enhanced_psnr
    return row


def _bd_or_none(anchor: RdCurve, test: RdCurve) -> Optional[float]:
    try:
        return bd_rate(anchor, test)
    except MetricError as e:
        log_event("evaluate", "bd-rate skipped", detail=e.detail)
        return None


def summarize(rows: Sequence[Mapping[str, Any]], config: ExperimentConfig) -> Dict[str, Any]:
    """Mean BD-rate per chroma plane over images with at least 4 usable QPs."""
    by_image: Dict[str, List[Mapping[str, Any]]] = {}
    for row in rows:
        if row.get("status") == "ok":
            by_image.setdefault(row["image"], []).append(row)

    bd: Dict[str, Dict[str, Optional[float]]] = {}
    for name in CHROMA_PLANES:
        online_vals: List[float] = []
        base_vals: List[float] = []
        for image_rows in by_image.values():
            if len(image_rows) < 4:
                continue
            degraded = RdCurve.of((r["image_bits"], r[f"degraded_psnr_{name}"]) for r in image_rows)
            baseline = RdCurve.of((r["image_bits"], r[f"baseline_psnr_{name}"]) for r in image_rows)
            online = RdCurve.of((r["image_bits"] + r["side_bits"], r[f"online_psnr_{name}"]) for r in image_rows)
            for curve, bucket in ((online, online_vals), (baseline, base_vals)):
                val = _bd_or_none(degraded, curve)
                if val is not None:
                    bucket.append(val)
        bd[name] = {
            "online_vs_degraded": float(np.mean(online_vals)) if online_vals else None,
            "baseline_vs_degraded": float(np.mean(base_vals)) if base_vals else None,
        }

    ok = [r for r in rows if r.get("status") == "ok"]
    return {
        "rows": len(rows),
        "failed": len(rows) - len(ok),
        "parity_ok": all(bool(r.get("parity_ok")) for r in ok),
        "mean_side_bits": float(np.mean([r["side_bits"] for r in ok])) if ok else None,
        "bd_rate": bd,
        "config": {
            "qps": list(config.qps),
            "online_enabled": config.online_enabled,
            "steps": config.online.steps,
            "lr": config.online.lr,
            "prec": config.prec,
            "seed": config.seed,
        },
    }


def load_experiment_model(config: ExperimentConfig) -> ModelParams:
    if config.checkpoint:
        return load_model(config.checkpoint)
    log_event("evaluate", "no checkpoint configured, using an untrained model", seed=config.seed)
    return build_oldn(config.model, seed=config.seed)


def run_experiment(config: ExperimentConfig, *, model: Optional[ModelParams] = None) -> Path:
    """Simulate every (image, QP) pair and write the report; failed items become error rows."""
    model = model if model is not None else load_experiment_model(config)
    images: Dict[str, Any] = {}
    for src in config.images:
        try:
            images[src] = load_rgb(src)
        except OldnError as e:
            images[src] = e
            log_event("evaluate", "cannot load image", image=src, code=e.code)

    def task(item: Tuple[str, int]) -> Dict[str, Any]:
        src, qp = item
        rgb = images[src]
        if isinstance(rgb, OldnError):
            return _row(src, qp, error=rgb)
        try:
            report = simulate_roundtrip(
                rgb, qp, model, config.online, prec=config.prec, online_enabled=config.online_enabled
            )
        except OldnError as e:
            log_event("evaluate", "item failed", image=src, qp=qp, code=e.code)
            return _row(src, qp, error=e)
        log_event("evaluate", "item done", image=src, qp=qp, side_bits=report.side_bits, parity=report.parity_ok)
        return _row(src, qp, report)

    items = [(src, qp) for src in config.images for qp in config.qps]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(task, items))
    else:
        rows = [task(item) for item in items]

    path = write_report(config.report, REPORT_COLUMNS, rows, summarize(rows, config))
    log_event("evaluate", "report written", path=str(path), rows=len(rows))
    return path
