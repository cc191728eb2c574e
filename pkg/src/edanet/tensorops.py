"""Dense NCHW tensors and the primitive operators every network variant uses.

All activations and weights are 32-bit floats.  Every operator is a pure
function: inputs are never mutated and repeated evaluation is bit-identical.
Accumulation happens in float32, in a fixed order per output element
(kernel taps in row-major order, input channels innermost), so results do
not depend on how many worker threads are in use.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BN_EPS",
    "Tensor",
    "Kernel",
    "BnParams",
    "LabelMap",
    "ShapeError",
    "conv2d",
    "transposed_conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "batch_norm",
    "channel_affine",
    "relu",
    "concat_channels",
    "add",
    "bilinear_resize",
    "argmax_channels",
    "zero_insert_kernel",
    "set_num_threads",
    "get_num_threads",
]

# 2-D int32 array of class indices (h, w).
LabelMap = np.ndarray

# Family-wide BN epsilon.  Small enough that float32(1.0) + eps == 1.0, so a
# freshly initialized BN (var = 1) is exactly the identity and folding it is
# bit-exact; still large enough to guard a zero variance.
BN_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when tensor shapes or channel counts are incompatible."""


def _as_f32(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise TypeError(f"{name} must be float32, got {arr.dtype}")
    return arr


@dataclass(frozen=True)
class Tensor:
    """Immutable dense 4-D array laid out (batch, channels, height, width).

    The constructor takes ownership of ``data`` and freezes it.  Use
    :meth:`from_array` to build a tensor from an arbitrary array-like
    without sharing storage with the caller.
    """

    data: np.ndarray

    def __post_init__(self):
        data = _as_f32(self.data, "Tensor.data")
        if data.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n,c,h,w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"all tensor dimensions must be >= 1, got {data.shape}")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @staticmethod
    def from_array(arr) -> "Tensor":
        a = np.array(arr, dtype=np.float32)
        while a.ndim < 4:
            a = a[None]
        return Tensor(a)

    @staticmethod
    def zeros(n: int, c: int, h: int, w: int) -> "Tensor":
        return Tensor(np.zeros((n, c, h, w), np.float32))

    @staticmethod
    def full(n: int, c: int, h: int, w: int, value: float) -> "Tensor":
        return Tensor(np.full((n, c, h, w), value, np.float32))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Kernel:
    """Convolution weights laid out (out_channels, in_channels, kh, kw)."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = _as_f32(self.weights, "Kernel.weights")
        if w.ndim != 4:
            raise ShapeError(f"kernel must be 4-D (out,in,kh,kw), got {w.shape}")
        if min(w.shape) < 1:
            raise ShapeError(f"all kernel dimensions must be >= 1, got {w.shape}")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = _as_f32(self.bias, "Kernel.bias")
            if b.shape != (w.shape[0],):
                raise ShapeError(
                    f"bias length {b.shape} does not match {w.shape[0]} output channels"
                )
            object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]


@dataclass(frozen=True)
class BnParams:
    """Batch-normalization inference parameters, one entry per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        vecs = {}
        for field in ("gamma", "beta", "running_mean", "running_var"):
            v = _as_f32(getattr(self, field), f"BnParams.{field}")
            if v.ndim != 1:
                raise ShapeError(f"BnParams.{field} must be 1-D, got {v.shape}")
            vecs[field] = v
            object.__setattr__(self, field, v)
        lengths = {v.shape[0] for v in vecs.values()}
        if len(lengths) != 1:
            raise ShapeError(f"BnParams vectors disagree in length: {lengths}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if np.any(vecs["running_var"] < 0):
            raise ValueError("running_var entries must be >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @staticmethod
    def identity(channels: int, eps: float = BN_EPS) -> "BnParams":
        """Parameters that make batch_norm an exact no-op (var = 1 - eps)."""
        one = np.ones(channels, np.float32)
        zero = np.zeros(channels, np.float32)
        var = np.full(channels, np.float32(1.0) - np.float32(eps), np.float32)
        return BnParams(one, zero, zero, var, eps)


# ---------------------------------------------------------------------------
# intra-op threading

_threads_lock = threading.Lock()
_num_threads = 1
_pool: ThreadPoolExecutor | None = None


def set_num_threads(n: int) -> None:
    """Set the worker count for row-parallel operators (results are
    bit-identical for any setting)."""
    global _num_threads, _pool
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    with _threads_lock:
        if n != _num_threads and _pool is not None:
            _pool.shutdown(wait=True)
            _pool = None
        _num_threads = n


def get_num_threads() -> int:
    return _num_threads


def _get_pool() -> ThreadPoolExecutor:
    global _pool
    with _threads_lock:
        if _pool is None:
            _pool = ThreadPoolExecutor(max_workers=_num_threads)
        return _pool


def _row_blocks(rows: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, rows))
    step = -(-rows // parts)
    return [(r, min(r + step, rows)) for r in range(0, rows, step)]


# ---------------------------------------------------------------------------
# convolution

def conv2d(
    input: Tensor,
    k: Kernel,
    stride: int = 1,
    dilation: int = 1,
    pad_h: int = 0,
    pad_w: int = 0,
) -> Tensor:
    """Cross-correlate ``input`` with ``k`` (zero padding, no kernel flip).

    Output height is floor((h + 2*pad_h - (dilation*(kh-1)+1)) / stride) + 1
    and analogously for width.  Each output element accumulates kernel taps
    in row-major order with the channel contraction innermost, so dilated
    kernels are bit-identical to their zero-inserted dilation-1 expansion.
    """
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if pad_h < 0 or pad_w < 0:
        raise ValueError("padding must be >= 0")
    if input.c != k.in_channels:
        raise ShapeError(
            f"input has {input.c} channels but kernel expects {k.in_channels}"
        )
    eff_h = dilation * (k.kh - 1) + 1
    eff_w = dilation * (k.kw - 1) + 1
    out_h = (input.h + 2 * pad_h - eff_h) // stride + 1
    out_w = (input.w + 2 * pad_w - eff_w) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"non-positive output size {out_h}x{out_w} for input "
            f"{input.h}x{input.w}, kernel {k.kh}x{k.kw}, dilation {dilation}"
        )

    x = input.data
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    w = k.weights

    def rows(sample: np.ndarray, r0: int, r1: int) -> np.ndarray:
        out = np.zeros((k.out_channels, r1 - r0, out_w), np.float32)
        for i in range(k.kh):
            for j in range(k.kw):
                y0 = r0 * stride + i * dilation
                x0 = j * dilation
                sl = sample[
                    :,
                    y0 : y0 + (r1 - r0 - 1) * stride + 1 : stride,
                    x0 : x0 + (out_w - 1) * stride + 1 : stride,
                ]
                out += np.einsum("oi,ihw->ohw", w[:, :, i, j], sl)
        return out

    results = []
    for n in range(input.n):
        sample = x[n]
        nthreads = get_num_threads()
        if nthreads > 1 and out_h >= 2 * nthreads and out_h * out_w >= 1024:
            blocks = _row_blocks(out_h, nthreads)
            futures = [_get_pool().submit(rows, sample, r0, r1) for r0, r1 in blocks]
            out = np.concatenate([f.result() for f in futures], axis=1)
        else:
            out = rows(sample, 0, out_h)
        if k.bias is not None:
            out += k.bias[:, None, None]
        results.append(out)
    return Tensor(np.stack(results))


def transposed_conv2d(input: Tensor, k: Kernel, stride: int) -> Tensor:
    """Transposed convolution: each input value scatter-adds its
    kernel-weighted stencil.  Output spatial size is (h-1)*stride + kh
    (no output padding)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if input.c != k.in_channels:
        raise ShapeError(
            f"input has {input.c} channels but kernel expects {k.in_channels}"
        )
    out_h = (input.h - 1) * stride + k.kh
    out_w = (input.w - 1) * stride + k.kw
    w = k.weights
    results = []
    for n in range(input.n):
        sample = input.data[n]
        out = np.zeros((k.out_channels, out_h, out_w), np.float32)
        for i in range(k.kh):
            for j in range(k.kw):
                contrib = np.einsum("oi,ihw->ohw", w[:, :, i, j], sample)
                out[
                    :,
                    i : i + (input.h - 1) * stride + 1 : stride,
                    j : j + (input.w - 1) * stride + 1 : stride,
                ] += contrib
        if k.bias is not None:
            out += k.bias[:, None, None]
        results.append(out)
    return Tensor(np.stack(results))


def zero_insert_kernel(k: Kernel, r: int) -> Kernel:
    """Expand a kernel to its dilation-r equivalent of size r*(n-1)+1 by
    inserting r-1 zeros between consecutive taps along each axis."""
    if r < 1:
        raise ValueError("dilation rate must be >= 1")
    eff_h = r * (k.kh - 1) + 1
    eff_w = r * (k.kw - 1) + 1
    w = np.zeros((k.out_channels, k.in_channels, eff_h, eff_w), np.float32)
    w[:, :, ::r, ::r] = k.weights
    return Kernel(w, k.bias)


# ---------------------------------------------------------------------------
# pooling

def max_pool2d(input: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Per-window maximum.  Padded cells never win (padding acts as -inf)."""
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError("invalid pooling configuration")
    if k == stride and pad == 0 and (input.h % stride or input.w % stride):
        raise ShapeError(
            f"spatial dims {input.h}x{input.w} not divisible by stride {stride}"
        )
    x = input.data
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   constant_values=-np.inf)
    h, w = x.shape[2], x.shape[3]
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"non-positive pooled size for input {input.h}x{input.w}")
    out = None
    for i in range(k):
        for j in range(k):
            sl = x[:, :, i : i + (out_h - 1) * stride + 1 : stride,
                   j : j + (out_w - 1) * stride + 1 : stride]
            out = sl.copy() if out is None else np.maximum(out, sl)
    return Tensor(np.ascontiguousarray(out))


def avg_pool2d(input: Tensor, k: int, stride: int) -> Tensor:
    """Per-window arithmetic mean (no padding)."""
    if k < 1 or stride < 1:
        raise ValueError("invalid pooling configuration")
    if k == stride and (input.h % stride or input.w % stride):
        raise ShapeError(
            f"spatial dims {input.h}x{input.w} not divisible by stride {stride}"
        )
    x = input.data
    out_h = (input.h - k) // stride + 1
    out_w = (input.w - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"non-positive pooled size for input {input.h}x{input.w}")
    acc = np.zeros((input.n, input.c, out_h, out_w), np.float32)
    for i in range(k):
        for j in range(k):
            acc += x[:, :, i : i + (out_h - 1) * stride + 1 : stride,
                     j : j + (out_w - 1) * stride + 1 : stride]
    return Tensor(acc * np.float32(1.0 / (k * k)))


def global_avg_pool(input: Tensor) -> Tensor:
    """Whole-plane arithmetic mean; output is 1x1 spatially."""
    return Tensor(input.data.mean(axis=(2, 3), keepdims=True, dtype=np.float32))


# ---------------------------------------------------------------------------
# normalization and elementwise ops

def batch_norm(input: Tensor, p: BnParams) -> Tensor:
    """Per-channel y = gamma * (x - mean) / sqrt(var + eps) + beta using the
    stored running statistics."""
    if input.c != p.channels:
        raise ShapeError(
            f"input has {input.c} channels but BnParams carries {p.channels}"
        )
    scale = p.gamma / np.sqrt(p.running_var + np.float32(p.eps))
    mean = p.running_mean[None, :, None, None]
    return Tensor(
        (input.data - mean) * scale[None, :, None, None]
        + p.beta[None, :, None, None]
    )


def channel_affine(input: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Per-channel y = scale * x + shift (the residue a folded BN leaves on a
    branch that has no convolution to absorb it)."""
    scale = _as_f32(scale, "scale")
    shift = _as_f32(shift, "shift")
    if scale.shape != (input.c,) or shift.shape != (input.c,):
        raise ShapeError(
            f"affine vectors of shape {scale.shape}/{shift.shape} do not match "
            f"{input.c} channels"
        )
    return Tensor(
        input.data * scale[None, :, None, None] + shift[None, :, None, None]
    )


def relu(input: Tensor) -> Tensor:
    return Tensor(np.maximum(input.data, np.float32(0.0)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis, a's channels first."""
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise ShapeError(
            f"concat requires equal batch/spatial dims, got {a.shape} vs {b.shape}"
        )
    return Tensor(np.concatenate([a.data, b.data], axis=1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data)


# ---------------------------------------------------------------------------
# resampling and readout

def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel centers and edge clamping.

    Source coordinate for output index d is (d + 0.5) * (in/out) - 0.5,
    clamped to [0, in-1]; the four neighbors blend with float32 arithmetic.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")

    def axis_coords(n_in: int, n_out: int):
        s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        s = np.clip(s, 0.0, n_in - 1)
        lo = np.floor(s).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (s - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis_coords(input.h, out_h)
    x0, x1, fx = axis_coords(input.w, out_w)
    d = input.data
    tl = d[:, :, y0[:, None], x0[None, :]]
    tr = d[:, :, y0[:, None], x1[None, :]]
    bl = d[:, :, y1[:, None], x0[None, :]]
    br = d[:, :, y1[:, None], x1[None, :]]
    fx = fx[None, None, None, :]
    fy = fy[None, None, :, None]
    one = np.float32(1.0)
    top = tl * (one - fx) + tr * fx
    bot = bl * (one - fx) + br * fx
    return Tensor(top * (one - fy) + bot * fy)


def argmax_channels(input: Tensor) -> LabelMap:
    """Index of the maximal channel per pixel; ties go to the lowest index."""
    if input.n != 1:
        raise ShapeError(f"argmax_channels expects batch size 1, got {input.n}")
    return np.argmax(input.data[0], axis=0).astype(np.int32)
