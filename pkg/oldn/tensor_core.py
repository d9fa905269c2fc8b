"""Minimal 4-axis tensor engine with reverse-mode autodiff.

Only the operations the OL-DN graph needs are implemented. Every op is a pure
function of its inputs; when a :class:`Tape` is active and at least one input
takes part in differentiation, the op is recorded together with a closure that
maps the upstream gradient onto its inputs.

Reductions use a fixed evaluation order (im2col + one matmul per conv, explicit
slice sums for pooling) so encoder and decoder produce bit-identical activations
for identical inputs and shapes.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PrecisionError, ShapeError, TapeError


Dims = Tuple[int, int, int, int]
BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.SINGLE else np.dtype(np.float64)

    @classmethod
    def of(cls, arr: np.ndarray) -> "Precision":
        return cls.DOUBLE if arr.dtype == np.float64 else cls.SINGLE


@dataclass(eq=False)
class Tensor4:
    """(batch, channels, height, width) real array, optionally tracked on a tape."""

    data: np.ndarray
    requires_grad: bool = False
    node_id: Optional[int] = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 axes, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr

    @property
    def dims(self) -> Dims:
        b, c, h, w = self.data.shape
        return int(b), int(c), int(h), int(w)

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, precision: Precision) -> "Tensor4":
        return Tensor4(self.data.astype(precision.dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor4":
        return Tensor4(self.data)

    @classmethod
    def zeros(cls, dims: Sequence[int], precision: Precision = Precision.SINGLE) -> "Tensor4":
        return cls(np.zeros(tuple(int(d) for d in dims), dtype=precision.dtype))

    @classmethod
    def from_plane(cls, plane: np.ndarray, precision: Precision = Precision.SINGLE) -> "Tensor4":
        """Wrap a 2-D (H, W) array as a (1, 1, H, W) tensor."""
        arr = np.asarray(plane, dtype=precision.dtype)
        if arr.ndim != 2:
            raise ShapeError(f"plane must be 2-D, got shape {arr.shape}")
        return cls(arr.reshape(1, 1, *arr.shape))

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor4(dims={self.dims}, {self.precision.value}{tag})"


# --- Tape -------------------------------------------------------------------

@dataclass
class TapeNode:
    op: str
    inputs: Tuple[int, ...]
    needs: Tuple[bool, ...]
    backward: Optional[BackwardFn]
    dims: Dims
    dtype: np.dtype


_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("oldn_tape", default=None)


class Tape:
    """Single-writer record of one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Leaves enter the tape the first time a tracked op consumes them.
    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._ids: Dict[int, int] = {}
        # Keeps python ids stable for the lifetime of the tape
        self._refs: List[Tensor4] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def node_of(self, t: Tensor4) -> Optional[int]:
        return self._ids.get(id(t))

    def tracks(self, t: Tensor4) -> bool:
        return t.requires_grad or id(t) in self._ids

    def watch(self, t: Tensor4) -> int:
        nid = self._ids.get(id(t))
        if nid is not None:
            return nid
        nid = self._append("leaf", (), (), None, t)
        return nid

    def _append(
        self,
        op: str,
        inputs: Tuple[int, ...],
        needs: Tuple[bool, ...],
        backward: Optional[BackwardFn],
        t: Tensor4,
    ) -> int:
        nid = len(self.nodes)
        self.nodes.append(TapeNode(op, inputs, needs, backward, t.dims, t.data.dtype))
        self._ids[id(t)] = nid
        self._refs.append(t)
        if op != "leaf":
            t.node_id = nid
        return nid

    def record(self, op: str, inputs: Sequence[Tensor4], out: Tensor4, backward: BackwardFn) -> Tensor4:
        needs = tuple(self.tracks(t) for t in inputs)
        if not any(needs):
            return out
        ids = tuple(self.watch(t) if need else -1 for t, need in zip(inputs, needs))
        out.requires_grad = True
        self._append(op, ids, needs, backward, out)
        return out

    def backward(self, loss: Tensor4) -> Dict[int, np.ndarray]:
        if loss.dims != (1, 1, 1, 1):
            raise TapeError(f"loss must be scalar (1,1,1,1), got {loss.dims}", code="non_scalar_loss")
        root = self.node_of(loss)
        if root is None:
            raise TapeError("loss tensor was not recorded on this tape", code="dangling_node")
        grads: Dict[int, np.ndarray] = {root: np.ones(loss.dims, dtype=loss.data.dtype)}
        for idx in range(root, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            parts = node.backward(g, node.needs)
            for inp, need, part in zip(node.inputs, node.needs, parts):
                if not need or part is None:
                    continue
                if inp < 0 or inp >= idx:
                    raise TapeError(f"node {idx} ({node.op}) references input {inp} out of order", code="dangling_node")
                prev = grads.get(inp)
                grads[inp] = part if prev is None else prev + part
        self.gradients = grads
        return grads

    def grad(self, t: Tensor4) -> np.ndarray:
        nid = self.node_of(t)
        if nid is None:
            raise TapeError(f"{t!r} is not on this tape", code="untracked")
        g = self.gradients.get(nid)
        if g is None:
            return np.zeros(t.dims, dtype=t.data.dtype)
        return g


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


class no_grad:
    """Suspend recording (finite differences, evaluation)."""

    def __enter__(self) -> None:
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPE.reset(self._token)


def backward(tape: Tape, loss: Tensor4) -> Dict[int, np.ndarray]:
    return tape.backward(loss)


def apply_op(op: str, inputs: Sequence[Tensor4], data: np.ndarray, grad_fn: BackwardFn) -> Tensor4:
    """Wrap ``data`` as the output of ``op`` and record it if a tape is active.

    Lets other modules define ops (losses, composite transforms) on the same tape.
    """
    out = Tensor4(np.ascontiguousarray(data))
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    return tape.record(op, inputs, out, grad_fn)


def _same_precision(op: str, *ts: Optional[Tensor4]) -> np.dtype:
    dtypes = {t.data.dtype for t in ts if t is not None}
    if len(dtypes) != 1:
        raise PrecisionError(f"{op}: operands mix precisions {sorted(str(d) for d in dtypes)}")
    for t in ts:
        if t is not None and min(t.dims) < 1:
            raise ShapeError(f"{op}: empty operand {t.dims}")
    return dtypes.pop()


# --- Ops --------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def conv2d(x: Tensor4, w: Tensor4, b: Optional[Tensor4] = None, stride: int = 1, pad: int = 0) -> Tensor4:
    """Cross-correlation with zero padding. ``w`` is (Cout, Cin, k, k), ``b`` is (1, Cout, 1, 1)."""
    _same_precision("conv2d", x, w, b)
    bsz, cin, h, wd = x.dims
    cout, wcin, k, k2 = w.dims
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}", x=x.dims, w=w.dims)
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k} larger than padded extent {hp}x{wp}")
    if (hp - k) % stride or (wp - k) % stride:
        raise ShapeError(f"conv2d: padded extent {hp}x{wp} not aligned to stride {stride} with kernel {k}")
    if b is not None and b.data.size != cout:
        raise ShapeError(f"conv2d: bias has {b.data.size} entries, expected {cout}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = w.data.reshape(cout, cin * k * k)
    cols = _im2col(xp, k, stride)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dx = dw = db = None
        if needs[1]:
            # im2col is recomputed instead of kept alive across the whole forward pass
            dw = (gmat.T @ _im2col(xp, k, stride)).reshape(w.dims)
        if len(needs) > 2 and needs[2]:
            db = g.sum(axis=(0, 2, 3)).reshape(b.dims)  # type: ignore[union-attr]
        if needs[0]:
            dcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, k, k)
            dxp = np.zeros((bsz, cin, hp, wp), dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = [x, w] + ([b] if b is not None else [])
    return apply_op("conv2d", inputs, out, grad_fn)


def relu(x: Tensor4) -> Tensor4:
    _same_precision("relu", x)
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), dtype=x.data.dtype))

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (g * mask,)

    return apply_op("relu", [x], out, grad_fn)


def sigmoid(x: Tensor4) -> Tensor4:
    _same_precision("sigmoid", x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", [x], out, grad_fn)


def add(x: Tensor4, y: Tensor4) -> Tensor4:
    _same_precision("add", x, y)
    if x.dims != y.dims:
        raise ShapeError(f"add: {x.dims} vs {y.dims}")

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (g, g)

    return apply_op("add", [x, y], x.data + y.data, grad_fn)


def concat_channels(x: Tensor4, y: Tensor4) -> Tensor4:
    _same_precision("concat_channels", x, y)
    bx, cx, hx, wx = x.dims
    by, cy, hy, wy = y.dims
    if (bx, hx, wx) != (by, hy, wy):
        raise ShapeError(f"concat_channels: {x.dims} vs {y.dims}")

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (g[:, :cx], g[:, cx:])

    return apply_op("concat_channels", [x, y], np.concatenate([x.data, y.data], axis=1), grad_fn)


def channel_scale(x: Tensor4, w: Tensor4) -> Tensor4:
    """Multiply channel ``i`` of every batch item by ``w_i``."""
    _same_precision("channel_scale", x, w)
    c = x.dims[1]
    if w.data.size != c:
        raise ShapeError(f"channel_scale: {w.data.size} weights for {c} channels")
    wv = w.data.reshape(1, c, 1, 1)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        dx = g * wv if needs[0] else None
        dw = (g * x.data).sum(axis=(0, 2, 3)).reshape(w.dims) if needs[1] else None
        return (dx, dw)

    return apply_op("channel_scale", [x, w], x.data * wv, grad_fn)


def gate_channels(x: Tensor4, s: Tensor4) -> Tensor4:
    """Per-batch channel gating: ``x`` (B,C,H,W) times ``s`` (B,C,1,1)."""
    _same_precision("gate_channels", x, s)
    bsz, c, _, _ = x.dims
    if s.dims != (bsz, c, 1, 1):
        raise ShapeError(f"gate_channels: gate {s.dims} does not match {x.dims}")

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        dx = g * s.data if needs[0] else None
        ds = (g * x.data).sum(axis=(2, 3), keepdims=True) if needs[1] else None
        return (dx, ds)

    return apply_op("gate_channels", [x, s], x.data * s.data, grad_fn)


def global_avg_pool(x: Tensor4) -> Tensor4:
    _same_precision("global_avg_pool", x)
    _, _, h, w = x.dims
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (np.broadcast_to(g / (h * w), x.dims).copy(),)

    return apply_op("global_avg_pool", [x], out, grad_fn)


def dense(v: Tensor4, w: Tensor4, b: Optional[Tensor4] = None) -> Tensor4:
    """Affine map per batch item: ``v`` (B,C,1,1), ``w`` (Cout,C,1,1), ``b`` (1,Cout,1,1)."""
    _same_precision("dense", v, w, b)
    bsz, c, h, wd = v.dims
    cout, wc = w.dims[0], w.dims[1]
    if (h, wd) != (1, 1) or wc != c or w.dims[2:] != (1, 1):
        raise ShapeError(f"dense: vector {v.dims} vs matrix {w.dims}")
    if b is not None and b.data.size != cout:
        raise ShapeError(f"dense: bias has {b.data.size} entries, expected {cout}")
    vm = v.data.reshape(bsz, c)
    wm = w.data.reshape(cout, c)
    out = vm @ wm.T
    if b is not None:
        out = out + b.data.reshape(1, cout)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        gm = g.reshape(bsz, cout)
        dv = (gm @ wm).reshape(v.dims) if needs[0] else None
        dw = (gm.T @ vm).reshape(w.dims) if needs[1] else None
        if b is None:
            return (dv, dw)
        db = gm.sum(axis=0).reshape(b.dims) if needs[2] else None
        return (dv, dw, db)

    inputs = [v, w] + ([b] if b is not None else [])
    return apply_op("dense", inputs, out.reshape(bsz, cout, 1, 1), grad_fn)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    bsz, c, h, w = a.shape
    return (
        a.reshape(bsz, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(bsz, c * r * r, h // r, w // r)
    )


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    bsz, c, h, w = a.shape
    co = c // (r * r)
    return (
        a.reshape(bsz, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(bsz, co, h * r, w * r)
    )


def pixel_unshuffle(x: Tensor4, r: int) -> Tensor4:
    """Space-to-depth: output channel ``c*r*r + dy*r + dx`` holds input pixel ``(y*r+dy, x*r+dx)``."""
    _same_precision("pixel_unshuffle", x)
    _, _, h, w = x.dims
    if r < 1 or h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: {h}x{w} not divisible by r={r}")

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (_shuffle(g, r),)

    return apply_op("pixel_unshuffle", [x], _unshuffle(x.data, r), grad_fn)


def pixel_shuffle(x: Tensor4, r: int) -> Tensor4:
    _same_precision("pixel_shuffle", x)
    c = x.dims[1]
    if r < 1 or c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (_unshuffle(g, r),)

    return apply_op("pixel_shuffle", [x], _shuffle(x.data, r), grad_fn)


def avg_pool2(x: Tensor4) -> Tensor4:
    _same_precision("avg_pool2", x)
    _, _, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: odd extent {h}x{w}")
    a = x.data
    out = (a[:, :, 0::2, 0::2] + a[:, :, 0::2, 1::2] + a[:, :, 1::2, 0::2] + a[:, :, 1::2, 1::2]) * 0.25

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        q = g * 0.25
        dx = np.empty(x.dims, dtype=g.dtype)
        dx[:, :, 0::2, 0::2] = q
        dx[:, :, 0::2, 1::2] = q
        dx[:, :, 1::2, 0::2] = q
        dx[:, :, 1::2, 1::2] = q
        return (dx,)

    return apply_op("avg_pool2", [x], out, grad_fn)


def sum_all(x: Tensor4) -> Tensor4:
    _same_precision("sum_all", x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (np.full(x.dims, g.reshape(()), dtype=g.dtype),)

    return apply_op("sum_all", [x], out, grad_fn)


def weighted_sum(x: Tensor4, weights: np.ndarray) -> Tensor4:
    """Scalar ``sum(x * weights)`` with a constant weight array (scalar loss for gradient checks)."""
    _same_precision("weighted_sum", x)
    wts = np.asarray(weights, dtype=x.data.dtype)
    if wts.shape != x.data.shape:
        raise ShapeError(f"weighted_sum: weights {wts.shape} vs {x.dims}")
    out = np.asarray((x.data * wts).sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def grad_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> Sequence[Optional[np.ndarray]]:
        return (wts * g.reshape(()),)

    return apply_op("weighted_sum", [x], out, grad_fn)


# --- Gradient checking ------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor4], Tensor4], x: Tensor4, eps: float = 1e-4) -> float:
    """Relative error between tape gradient and central differences of ``f`` at ``x``.

    Max over coordinates of ``|a - b| / max(|a|, |b|, 1e-12)``. Coordinates where
    both gradients are zero (dead ReLU units) contribute 0.

    ``f`` builds a scalar graph from its argument. Requires double precision.
    """
    if x.precision is not Precision.DOUBLE:
        raise PrecisionError("finite_diff_check requires double precision")
    leaf = Tensor4(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
        tape.backward(loss)
        analytic = tape.grad(leaf)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + eps
            fp = float(f(Tensor4(base.copy())).data.reshape(()))
            base[idx] = orig - eps
            fm = float(f(Tensor4(base.copy())).data.reshape(()))
            base[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
