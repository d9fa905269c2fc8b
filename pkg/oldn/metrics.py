"""Quality and rate-distortion metrics: PSNR, BD-rate, image rate proxy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Literal, Sequence, Tuple

import numpy as np
from scipy.integrate import simpson

from .errors import MetricError, ShapeError


PSNR_CAP = 99.0
SIMPSON_POINTS = 1001  # 1000 panels

PlaneLike = Any  # Plane or 2-D array


def _samples(p: PlaneLike) -> np.ndarray:
    return np.asarray(getattr(p, "samples", p), dtype=np.float64)


def psnr(a: PlaneLike, b: PlaneLike, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE), capped at 99 dB (identical inputs)."""
    x, y = _samples(a), _samples(b)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ShapeError("psnr of empty planes")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


@dataclass(frozen=True)
class RdPoint:
    rate: float  # bits
    psnr: float  # dB

    def __post_init__(self) -> None:
        if not self.rate > 0 or not math.isfinite(self.rate):
            raise MetricError(f"rate must be positive and finite, got {self.rate}")
        if not math.isfinite(self.psnr):
            raise MetricError(f"psnr must be finite, got {self.psnr}")


@dataclass(frozen=True)
class RdCurve:
    points: Tuple[RdPoint, ...]

    @classmethod
    def of(cls, pairs: Iterable[Tuple[float, float]]) -> "RdCurve":
        return cls(tuple(sorted((RdPoint(float(r), float(q)) for r, q in pairs), key=lambda p: p.rate)))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points], dtype=np.float64)

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points], dtype=np.float64)


def _fit(curve: RdCurve) -> np.ndarray:
    if len(curve) < 4:
        raise MetricError(f"BD-rate needs at least 4 points per curve, got {len(curve)}")
    q = curve.psnrs
    if np.unique(q).size < 4:
        raise MetricError("BD-rate needs 4 distinct PSNR values per curve")
    return np.polyfit(q, np.log10(curve.rates), 3)


def bd_rate(anchor: RdCurve, test: RdCurve, method: Literal["simpson", "analytic"] = "simpson") -> float:
    """Average rate difference (%) of ``test`` against ``anchor`` at equal PSNR; negative saves rate."""
    pa, pt = _fit(anchor), _fit(test)
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise MetricError(f"PSNR ranges do not overlap ({lo:.3f} >= {hi:.3f})")
    if method == "analytic":
        ia, it = np.polyint(pa), np.polyint(pt)
        int_a = np.polyval(ia, hi) - np.polyval(ia, lo)
        int_t = np.polyval(it, hi) - np.polyval(it, lo)
    elif method == "simpson":
        xs = np.linspace(lo, hi, SIMPSON_POINTS)
        int_a = simpson(np.polyval(pa, xs), x=xs)
        int_t = simpson(np.polyval(pt, xs), x=xs)
    else:
        raise MetricError(f"unknown integration method {method!r}")
    avg = (int_t - int_a) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


def level_bits(levels: np.ndarray) -> float:
    """Rate proxy: nonzero count times max(1, entropy of the nonzero levels) in bits."""
    nz = np.asarray(levels).ravel()
    nz = nz[nz != 0]
    if nz.size == 0:
        return 0.0
    _, counts = np.unique(nz, return_counts=True)
    p = counts / nz.size
    entropy = float(-(p * np.log2(p)).sum())
    return float(nz.size * max(1.0, entropy))


def image_rate_bits(levels: Sequence[np.ndarray]) -> float:
    return max(1.0, sum(level_bits(l) for l in levels))
