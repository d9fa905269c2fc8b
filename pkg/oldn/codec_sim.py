"""Desk-scale stand-in for an intra codec: colour conversion, 4:2:0, block-DCT quantization.

The colour matrix is applied exactly as published, full-range weights with
limited-range offsets, so bright inputs clamp at 255 on luma.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import cv2
import numpy as np

from .errors import ConfigError, ImageFormatError, ShapeError
from .freq_transform import BLOCK, block_dct_plane, block_idct_plane
from .storage import read_pnm, read_yuv420, write_pnm, write_yuv420


RGB_TO_YUV = np.array(
    [
        [0.2126, 0.7152, 0.0722],
        [-0.1146, -0.3854, 0.5],
        [0.5, -0.4542, -0.0458],
    ],
    dtype=np.float64,
)
YUV_OFFSET = np.array([16.0, 128.0, 128.0], dtype=np.float64)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

SYNTHETIC_PREFIX = "synthetic:"


@dataclass(frozen=True)
class Plane:
    samples: np.ndarray  # (height, width) uint8, row-major

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples)
        if arr.ndim != 2:
            raise ShapeError(f"plane must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise ImageFormatError("plane samples outside [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "samples", arr)

    @property
    def height(self) -> int:
        return int(self.samples.shape[0])

    @property
    def width(self) -> int:
        return int(self.samples.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class Yuv420Frame:
    y: Plane
    u: Plane
    v: Plane

    def __post_init__(self) -> None:
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise ShapeError(f"4:2:0 frame needs even luma dimensions, got {w}x{h}")
        for name, p in (("u", self.u), ("v", self.v)):
            if p.shape != (h // 2, w // 2):
                raise ShapeError(f"{name} plane {p.shape} is not half of luma {self.y.shape}")

    @property
    def width(self) -> int:
        return self.y.width

    @property
    def height(self) -> int:
        return self.y.height

    def chroma(self, name: str) -> Plane:
        if name not in ("u", "v"):
            raise ValueError(f"unknown chroma plane {name!r}")
        return self.u if name == "u" else self.v

    def replace(self, **planes: Plane) -> "Yuv420Frame":
        return Yuv420Frame(planes.get("y", self.y), planes.get("u", self.u), planes.get("v", self.v))


@dataclass(frozen=True)
class QpConfig:
    qp: int

    def __post_init__(self) -> None:
        if not 0 <= int(self.qp) <= 51:
            raise ConfigError(f"QP {self.qp} outside [0, 51]")

    @property
    def qstep(self) -> float:
        """Doubles every 6 QP; exactly 1 at QP 4."""
        return float(2.0 ** ((int(self.qp) - 4) / 6.0))


# --- Colour conversion --------------------------------------------------------

def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def rgb_to_yuv420(rgb: np.ndarray) -> Yuv420Frame:
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) RGB image, got {arr.shape}")
    h, w = arr.shape[:2]
    if h % 2 or w % 2:
        raise ShapeError(f"RGB image needs even dimensions for 4:2:0, got {w}x{h}")
    yuv = arr.astype(np.float64) @ RGB_TO_YUV.T + YUV_OFFSET
    chroma = yuv[:, :, 1:].reshape(h // 2, 2, w // 2, 2, 2).mean(axis=(1, 3))
    return Yuv420Frame(Plane(_to_u8(yuv[:, :, 0])), Plane(_to_u8(chroma[:, :, 0])), Plane(_to_u8(chroma[:, :, 1])))


def _upsample(p: Plane) -> np.ndarray:
    return np.repeat(np.repeat(p.samples.astype(np.float64), 2, axis=0), 2, axis=1)


def yuv420_to_rgb(frame: Yuv420Frame) -> np.ndarray:
    yuv = np.stack([frame.y.samples.astype(np.float64), _upsample(frame.u), _upsample(frame.v)], axis=2)
    return _to_u8((yuv - YUV_OFFSET) @ YUV_TO_RGB.T)


# --- Degradation --------------------------------------------------------------

def pad_to_multiple(array: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate the first two axes up to a multiple of ``multiple``."""
    arr = np.asarray(array)
    h, w = arr.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="edge")


def quantize_plane(plane: Plane, cfg: QpConfig) -> Tuple[Plane, np.ndarray]:
    """Degraded plane plus the integer coefficient levels, shape (64, H/8, W/8) after padding."""
    h, w = plane.shape
    padded = pad_to_multiple(plane.samples, BLOCK).astype(np.float64)
    step = cfg.qstep
    levels = np.rint(block_dct_plane(padded) / step)
    recon = block_idct_plane(levels * step)[:h, :w]
    return Plane(_to_u8(recon)), levels.astype(np.int32)


def degrade_plane(plane: Plane, cfg: QpConfig) -> Plane:
    return quantize_plane(plane, cfg)[0]


def degrade_frame(frame: Yuv420Frame, cfg: QpConfig) -> Tuple[Yuv420Frame, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    y, ly = quantize_plane(frame.y, cfg)
    u, lu = quantize_plane(frame.u, cfg)
    v, lv = quantize_plane(frame.v, cfg)
    return Yuv420Frame(y, u, v), (ly, lu, lv)


# --- Image sources ------------------------------------------------------------

def synthetic_image(seed: int, width: int, height: int) -> np.ndarray:
    """Deterministic natural-looking RGB test image: gradients, filled shapes, soft texture."""
    if width <= 0 or height <= 0:
        raise ShapeError(f"invalid synthetic size {width}x{height}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    base = np.empty((height, width, 3), dtype=np.float32)
    for ch in range(3):
        c0, gx, gy = rng.uniform(60, 190), rng.uniform(-60, 60), rng.uniform(-60, 60)
        base[:, :, ch] = c0 + gx * xx / width + gy * yy / height
    img = np.ascontiguousarray(np.clip(base, 0, 255).astype(np.uint8))

    for _ in range(int(rng.integers(4, 9))):
        color = tuple(int(c) for c in rng.integers(20, 236, size=3))
        cx, cy = int(rng.integers(0, width)), int(rng.integers(0, height))
        size = int(rng.integers(max(2, min(width, height) // 10), max(3, min(width, height) // 3)))
        kind = int(rng.integers(0, 3))
        if kind == 0:
            cv2.circle(img, (cx, cy), size, color, -1, lineType=cv2.LINE_AA)
        elif kind == 1:
            cv2.rectangle(img, (cx, cy), (cx + size, cy + size // 2 + 1), color, -1)
        else:
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(img, (cx, cy), (size, size // 2 + 1), angle, 0, 360, color, -1, lineType=cv2.LINE_AA)

    noise = rng.normal(0.0, 10.0, size=(height, width, 3)).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=1.2)
    return np.clip(img.astype(np.float32) + noise, 0, 255).astype(np.uint8)


def parse_synthetic(spec: str) -> Tuple[int, int, int]:
    """``synthetic:SEED:WxH`` -> (seed, width, height)."""
    try:
        _, seed, size = spec.split(":")
        w, h = size.lower().split("x")
        return int(seed), int(w), int(h)
    except ValueError as e:
        raise ImageFormatError(f"bad synthetic spec {spec!r}, expected synthetic:SEED:WxH") from e


def load_rgb(path: Union[str, Path]) -> np.ndarray:
    """RGB (H, W, 3) uint8 from a PPM, any OpenCV-readable file, or a ``synthetic:`` spec."""
    text = str(path)
    if text.startswith(SYNTHETIC_PREFIX):
        return synthetic_image(*parse_synthetic(text))
    p = Path(text)
    if p.suffix.lower() == ".ppm":
        return read_pnm(p)
    bgr = cv2.imread(str(p), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ImageFormatError(f"cannot decode image {p}", path=str(p))
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


Image = Union[Plane, Yuv420Frame, np.ndarray]


def load_image(path: Union[str, Path], *, width: int | None = None, height: int | None = None) -> Image:
    """PGM -> Plane, PPM -> RGB array, ``.yuv`` -> Yuv420Frame (needs width/height)."""
    p = Path(path)
    if p.suffix.lower() == ".yuv":
        if width is None or height is None:
            raise ImageFormatError("raw YUV420 needs explicit width and height")
        y, u, v = read_yuv420(p, width, height)
        return Yuv420Frame(Plane(y), Plane(u), Plane(v))
    arr = read_pnm(p)
    return Plane(arr) if arr.ndim == 2 else arr


def save_image(path: Union[str, Path], image: Image) -> Path:
    if isinstance(image, Yuv420Frame):
        return write_yuv420(path, image.y.samples, image.u.samples, image.v.samples)
    if isinstance(image, Plane):
        return write_pnm(path, image.samples)
    return write_pnm(path, np.asarray(image))

