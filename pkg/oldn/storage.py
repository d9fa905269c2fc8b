"""On-disk formats: model checkpoints, PGM/PPM, raw planar YUV420, reports.

Everything here speaks plain numpy arrays so the codec and network layers can
sit on top without import cycles.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import orjson

from .errors import CheckpointError, ImageFormatError, UnsupportedFormatError
from .network import ModelParams, params_from_arrays
from .settings import DATA_DIR
from .tensor_core import Precision


CHECKPOINT_MAGIC = b"OLDN"
CHECKPOINT_VERSION = 1
CHECKPOINT_PATH = Path(os.environ.get("OLDN_CHECKPOINT", DATA_DIR / "baseline.oldn"))


# --- Checkpoints --------------------------------------------------------------

def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.ndim != 4:
            raise CheckpointError(f"tensor {name!r} has {arr.ndim} axes, expected 4")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<4I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def decode_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an OLDN checkpoint (bad magic)", code="checkpoint_magic")
    if len(data) < 12:
        raise CheckpointError("checkpoint header truncated", code="checkpoint_truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", code="checkpoint_version")
    pos = 12
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dims = struct.unpack_from("<4I", data, pos)
            pos += 16
            size = int(np.prod(dims)) * 4
            if pos + size > len(data):
                raise CheckpointError(f"tensor {name!r} truncated", code="checkpoint_truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as e:
        raise CheckpointError(f"checkpoint truncated: {e}", code="checkpoint_truncated") from e
    except UnicodeDecodeError as e:
        raise CheckpointError(f"bad tensor name: {e}") from e
    return tensors


def write_checkpoint(path: Path | str, tensors: Mapping[str, np.ndarray]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_checkpoint(tensors))
    return p


def read_checkpoint(path: Path | str) -> Dict[str, np.ndarray]:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {p}: {e}", path=str(p)) from e
    return decode_checkpoint(data)


# --- PGM / PPM ----------------------------------------------------------------

def _pnm_header(data: bytes) -> Tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("PNM header truncated")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError(f"malformed PNM header: {e}") from e
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid PNM size {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"PNM maxval {maxval} not supported (8-bit only)", maxval=maxval)
    return magic, width, height, maxval, pos


def decode_pnm(data: bytes) -> np.ndarray:
    """P5 -> (H, W) uint8, P6 -> (H, W, 3) uint8."""
    magic, width, height, _, pos = _pnm_header(data)
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    raster = data[pos:]
    if len(raster) != expected:
        raise ImageFormatError(f"PNM raster has {len(raster)} bytes, expected {expected}", expected=expected, got=len(raster))
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width).copy() if channels == 1 else arr.reshape(height, width, 3).copy()


def encode_pnm(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"PNM output needs uint8 samples, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot store shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_pnm(path: Path | str) -> np.ndarray:
    p = Path(path)
    try:
        return decode_pnm(p.read_bytes())
    except OSError as e:
        raise ImageFormatError(f"cannot read {p}: {e}", path=str(p)) from e


def write_pnm(path: Path | str, image: np.ndarray) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_pnm(image))
    return p


# --- Raw planar YUV420 --------------------------------------------------------

def yuv420_size(width: int, height: int) -> int:
    if width <= 0 or height <= 0 or width % 2 or height % 2:
        raise ImageFormatError(f"YUV420 needs positive even dimensions, got {width}x{height}")
    return width * height * 3 // 2


def read_yuv420(path: Path | str, width: int, height: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = Path(path)
    expected = yuv420_size(width, height)
    try:
        data = p.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"cannot read {p}: {e}", path=str(p)) from e
    if len(data) != expected:
        raise ImageFormatError(
            f"{p.name}: {len(data)} bytes, expected {expected} for {width}x{height} YUV420",
            expected=expected,
            got=len(data),
        )
    flat = np.frombuffer(data, dtype=np.uint8)
    ny, nc = width * height, (width // 2) * (height // 2)
    y = flat[:ny].reshape(height, width).copy()
    u = flat[ny:ny + nc].reshape(height // 2, width // 2).copy()
    v = flat[ny + nc:].reshape(height // 2, width // 2).copy()
    return y, u, v


def write_yuv420(path: Path | str, y: np.ndarray, u: np.ndarray, v: np.ndarray) -> Path:
    height, width = y.shape
    yuv420_size(width, height)
    if u.shape != (height // 2, width // 2) or v.shape != u.shape:
        raise ImageFormatError(f"chroma {u.shape}/{v.shape} does not match luma {y.shape}")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(b"".join(np.ascontiguousarray(a, dtype=np.uint8).tobytes() for a in (y, u, v)))
    return p


# --- Reports ------------------------------------------------------------------

SUMMARY_MARKER = "# summary"


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_report(columns: Sequence[str], rows: Sequence[Mapping[str, Any]], summary: Mapping[str, Any]) -> bytes:
    """CSV table with a header row, then ``# summary`` and a JSON block."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    text = buf.getvalue() + SUMMARY_MARKER + "\n"
    return text.encode("utf-8") + orjson.dumps(summary, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n"


def write_report(
    path: Path | str,
    columns: Sequence[str],
    rows: Sequence[Mapping[str, Any]],
    summary: Mapping[str, Any],
) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(render_report(columns, rows, summary))
    return p


def read_report(path: Path | str) -> Tuple[List[Dict[str, str]], Optional[Dict[str, Any]]]:
    text = Path(path).read_text(encoding="utf-8")
    table, _, tail = text.partition(SUMMARY_MARKER + "\n")
    rows = list(csv.DictReader(io.StringIO(table)))
    summary = orjson.loads(tail) if tail.strip() else None
    return rows, summary


# --- Models -------------------------------------------------------------------

def save_model(path: Path | str, params: ModelParams) -> Path:
    return write_checkpoint(path, {p: t.data for p, t in params.tensors.items()})


def load_model(path: Path | str, precision: Precision = Precision.SINGLE) -> ModelParams:
    return params_from_arrays(read_checkpoint(path), precision)
