"""Self-check suites behind ``oldn gradcheck`` and ``oldn dctcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from .freq_transform import BLOCK, dct_conv, idct_conv
from .network import ModelParams, build_oldn, oldn_forward
from .settings import ModelConfig
from .tensor_core import (
    Dims,
    Precision,
    Tensor4,
    add,
    avg_pool2,
    channel_scale,
    concat_channels,
    conv2d,
    dense,
    finite_diff_check,
    gate_channels,
    global_avg_pool,
    no_grad,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    sigmoid,
    weighted_sum,
)
from .training import mse_loss


GRAD_EPS = 1e-4
MODEL_GRAD_EPS = 1e-6
GRAD_TOLERANCE = 1e-4
DCT_TOLERANCE = 1e-5
PARSEVAL_TOLERANCE = 1e-6

TOY_MODEL = ModelConfig(n=8, expand=2, cab_reduction=4, n_wb_branch=1, recon_blocks=["olwb", "wb"])


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float

    @property
    def ok(self) -> bool:
        return bool(self.value <= self.threshold)

    def line(self) -> str:
        return f"{'ok  ' if self.ok else 'FAIL'} {self.name} value={self.value:.3e} threshold={self.threshold:.0e}"


# --- Gradients ------------------------------------------------------------------

def _scalarize(fn: Callable[[Tensor4], Tensor4], seed: int) -> Callable[[Tensor4], Tensor4]:
    """Scalar ``sum(fn(x) * W)`` with a random W fixed per output shape."""
    weights: Dict[Dims, np.ndarray] = {}

    def f(x: Tensor4) -> Tensor4:
        out = fn(x)
        w = weights.get(out.dims)
        if w is None:
            w = weights[out.dims] = np.random.default_rng(seed).standard_normal(out.dims)
        return weighted_sum(out, w)

    return f


def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor4], Tensor4], Tensor4]]:
    def t(*dims: int) -> Tensor4:
        return Tensor4(rng.standard_normal(dims))

    x = t(2, 3, 6, 6)
    odd = t(1, 3, 7, 7)
    w = t(4, 3, 3, 3)
    b = t(1, 4, 1, 1)
    other = t(2, 3, 6, 6)
    gate = t(2, 3, 1, 1)
    scale = t(1, 3, 1, 1)
    vec = t(2, 5, 1, 1)
    mat = t(4, 5, 1, 1)
    bias = t(1, 4, 1, 1)
    plane = Tensor4(rng.uniform(0.0, 1.0, (1, 1, 16, 16)))
    coeffs = t(1, BLOCK * BLOCK, 2, 2)
    target = t(2, 3, 6, 6)
    off_kink = Tensor4(x.data + np.sign(x.data) * 0.1)

    return [
        ("conv2d.x", lambda v: conv2d(v, w, b, stride=1, pad=1), x),
        ("conv2d.w", lambda v: conv2d(x, v, b, stride=1, pad=1), w),
        ("conv2d.b", lambda v: conv2d(x, w, v, stride=1, pad=1), b),
        ("conv2d.stride2", lambda v: conv2d(v, w, b, stride=2, pad=0), odd),
        ("relu", relu, off_kink),
        ("sigmoid", sigmoid, x),
        ("add", lambda v: add(v, other), x),
        ("concat_channels", lambda v: concat_channels(other, v), x),
        ("channel_scale.x", lambda v: channel_scale(v, scale), x),
        ("channel_scale.w", lambda v: channel_scale(x, v), scale),
        ("gate_channels.x", lambda v: gate_channels(v, gate), x),
        ("gate_channels.s", lambda v: gate_channels(x, v), gate),
        ("global_avg_pool", global_avg_pool, x),
        ("dense.v", lambda v: dense(v, mat, bias), vec),
        ("dense.w", lambda v: dense(vec, v, bias), mat),
        ("dense.b", lambda v: dense(vec, mat, v), bias),
        ("pixel_unshuffle", lambda v: pixel_unshuffle(v, 2), x),
        ("pixel_shuffle", lambda v: pixel_shuffle(v, 2), t(1, 8, 3, 3)),
        ("avg_pool2", avg_pool2, x),
        ("dct_conv", dct_conv, plane),
        ("idct_conv", idct_conv, coeffs),
        ("mse_loss", lambda v: mse_loss(v, target), x),
    ]


def _with_tensor(params: ModelParams, path: str, value: Tensor4) -> ModelParams:
    tensors = dict(params.tensors)
    tensors[path] = value
    return ModelParams(params.config, tensors)


def _model_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor4], Tensor4], Tensor4]]:
    params = build_oldn(TOY_MODEL, seed=int(rng.integers(1 << 30)), precision=Precision.DOUBLE)
    al = params.online_paths()[0]
    params.tensors[al] = Tensor4(rng.uniform(0.5, 1.5, params[al].dims))
    luma = Tensor4(rng.uniform(0.0, 1.0, (1, 1, 16, 16)))
    chroma = Tensor4(rng.uniform(0.0, 1.0, (1, 1, 8, 8)))

    def wrt(path: str) -> Callable[[Tensor4], Tensor4]:
        return lambda v: oldn_forward(_with_tensor(params, path, v), luma, chroma)

    conv = "recon.tail.weight"
    return [
        ("oldn.chroma", lambda v: oldn_forward(params, luma, v), chroma),
        ("oldn.luma", lambda v: oldn_forward(params, v, chroma), luma),
        (f"oldn.{al}", wrt(al), params[al]),
        (f"oldn.{conv}", wrt(conv), params[conv]),
    ]


def gradcheck_suite(
    seed: int = 0,
    eps: float = GRAD_EPS,
    tolerance: float = GRAD_TOLERANCE,
    model_eps: float = MODEL_GRAD_EPS,
) -> List[CheckResult]:
    """Tape gradients against central differences for every op and the toy graph (double precision).

    Single ops are smooth at their inputs and take ``eps``. The toy graph has ReLU
    kinks inside, so it takes the smaller ``model_eps``.
    """
    rng = np.random.default_rng(seed)
    cases = [(c, eps) for c in _op_cases(rng)] + [(c, model_eps) for c in _model_cases(rng)]
    results: List[CheckResult] = []
    for i, ((name, fn, x), step) in enumerate(cases):
        err = finite_diff_check(_scalarize(fn, seed + i), x, eps=step)
        results.append(CheckResult(f"grad.{name}", err, tolerance))
    return results


# --- DCT --------------------------------------------------------------------------

def naive_block_dct(plane: np.ndarray, n: int = BLOCK) -> np.ndarray:
    """Per-block DCT-II by direct summation; returns (n*n, H/n, W/n) like ``dct_conv``."""
    x = np.asarray(plane, dtype=np.float64)
    h, w = x.shape
    basis = np.array(
        [[math.cos(math.pi * (2 * i + 1) * u / (2 * n)) for i in range(n)] for u in range(n)]
    )
    basis[0] *= math.sqrt(1.0 / n)
    basis[1:] *= math.sqrt(2.0 / n)
    out = np.empty((n * n, h // n, w // n))
    for by in range(h // n):
        for bx in range(w // n):
            block = x[by * n:(by + 1) * n, bx * n:(bx + 1) * n]
            out[:, by, bx] = (basis @ block @ basis.T).ravel()
    return out


def dctcheck_suite(seed: int = 0, planes: int = 100, size: int = 64) -> List[CheckResult]:
    """Inverse identity (single precision), agreement with direct summation, and Parseval."""
    rng = np.random.default_rng(seed)
    identity = oracle = parseval = 0.0
    with no_grad():
        for _ in range(planes):
            plane = rng.uniform(0.0, 1.0, (size, size))
            x32 = Tensor4.from_plane(plane, precision=Precision.SINGLE)
            back = idct_conv(dct_conv(x32)).data[0, 0]
            identity = max(identity, float(np.max(np.abs(back - x32.data[0, 0]))))

            coeffs = dct_conv(Tensor4.from_plane(plane, precision=Precision.DOUBLE)).data[0]
            oracle = max(oracle, float(np.max(np.abs(coeffs - naive_block_dct(plane)))))
            energy = float(np.sum(plane * plane))
            parseval = max(parseval, abs(float(np.sum(coeffs * coeffs)) - energy) / energy)
    return [
        CheckResult("dct.identity", identity, DCT_TOLERANCE),
        CheckResult("dct.naive_oracle", oracle, DCT_TOLERANCE),
        CheckResult("dct.parseval", parseval, PARSEVAL_TOLERANCE),
    ]
