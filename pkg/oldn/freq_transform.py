"""Block DCT-II as a strided convolution, and its exact inverse.

``dct_conv`` slides N*N fixed kernels over the image without overlap; output
channel ``u*N + v`` holds the (u, v) coefficient of every block, so coefficients
of one frequency sit next to their spatial neighbours. ``idct_conv`` applies the
transposed (orthonormal) map: a 1x1 conv from coefficient channels to pixel
offsets followed by depth-to-space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .tensor_core import Precision, Tensor4, conv2d, pixel_shuffle


BLOCK = 8


@dataclass(frozen=True)
class DctKernelBank:
    n: int
    forward: np.ndarray  # (N*N, 1, N, N), float64
    inverse: np.ndarray  # (N*N, N*N, 1, 1), float64: pixel offset <- coefficient channel

    def forward_kernel(self, dtype: np.dtype) -> Tensor4:
        return Tensor4(self.forward.astype(dtype))

    def inverse_kernel(self, dtype: np.dtype) -> Tensor4:
        return Tensor4(self.inverse.astype(dtype))


def _c(u: int, n: int) -> float:
    return math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)


@lru_cache(maxsize=8)
def dct_kernel_bank(n: int = BLOCK) -> DctKernelBank:
    if n < 1:
        raise ShapeError(f"DCT block size must be >= 1, got {n}")
    idx = np.arange(n, dtype=np.float64)
    forward = np.empty((n * n, 1, n, n), dtype=np.float64)
    for u in range(n):
        cu = np.cos((idx + 0.5) * math.pi * u / n)  # varies with row i
        for v in range(n):
            cv = np.cos((idx + 0.5) * math.pi * v / n)  # varies with column j
            forward[u * n + v, 0] = _c(u, n) * _c(v, n) * np.outer(cu, cv)
    # inverse[i*n + j, c] = F_c[i, j]
    inverse = forward.reshape(n * n, n * n).T.copy().reshape(n * n, n * n, 1, 1)
    forward.setflags(write=False)
    inverse.setflags(write=False)
    return DctKernelBank(n=n, forward=forward, inverse=inverse)


def dct_conv(x: Tensor4, bank: DctKernelBank | None = None) -> Tensor4:
    """(B, 1, H, W) -> (B, N*N, H/N, W/N) block DCT coefficients."""
    bank = bank or dct_kernel_bank()
    n = bank.n
    _, c, h, w = x.dims
    if c != 1:
        raise ShapeError(f"dct_conv expects a single-channel input, got {c} channels")
    if h % n or w % n:
        raise ShapeError(f"dct_conv: {h}x{w} not divisible by block size {n}")
    return conv2d(x, bank.forward_kernel(x.data.dtype), None, stride=n, pad=0)


def idct_conv(y: Tensor4, bank: DctKernelBank | None = None) -> Tensor4:
    """(B, N*N, h, w) -> (B, 1, h*N, w*N), exact inverse of :func:`dct_conv`."""
    bank = bank or dct_kernel_bank()
    n = bank.n
    if y.dims[1] != n * n:
        raise ShapeError(f"idct_conv expects {n * n} coefficient channels, got {y.dims[1]}")
    offsets = conv2d(y, bank.inverse_kernel(y.data.dtype), None, stride=1, pad=0)
    return pixel_shuffle(offsets, n)


def block_dct_plane(plane: np.ndarray, bank: DctKernelBank | None = None) -> np.ndarray:
    """Float64 coefficients for a 2-D plane whose sides are multiples of N."""
    coeffs = dct_conv(Tensor4.from_plane(np.asarray(plane, dtype=np.float64), precision=Precision.DOUBLE), bank)
    return coeffs.data[0]


def block_idct_plane(coeffs: np.ndarray, bank: DctKernelBank | None = None) -> np.ndarray:
    pixels = idct_conv(Tensor4(np.asarray(coeffs, dtype=np.float64)[None]), bank)
    return pixels.data[0, 0]