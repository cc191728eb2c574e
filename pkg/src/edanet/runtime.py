"""Weight storage, deterministic initialization, BN folding, and the
forward executor.

Weights live in a WeightStore keyed ``<layer>.<step>.<param>`` (for example
``m1_1.conv1x1.w`` or ``m1_1.bn1.gamma``).  The on-disk ``.edaw`` format is
little-endian: a 16-byte header (magic ``EDAW``, version u32, entry count
u32, reserved u32) followed by one record per tensor.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import blocks
from .blocks import (
    AffineStep,
    AvgPoolStep,
    BnStep,
    Chain,
    ConvStep,
    DeconvStep,
    DenseConcat,
    DropoutStep,
    GlobalAvgPoolStep,
    MaxPoolStep,
    Parallel,
    ReluStep,
    Residual,
    ResizeToInputStep,
    UpsampleStep,
    iter_prims,
)
from .netdef import NetworkSpec, expand_layer, fold_layer, spatial_divisor
from .tensorops import (
    BN_EPS,
    BnParams,
    Kernel,
    LabelMap,
    ShapeError,
    Tensor,
    add,
    argmax_channels,
    avg_pool2d,
    batch_norm,
    bilinear_resize,
    channel_affine,
    concat_channels,
    conv2d,
    global_avg_pool,
    max_pool2d,
    relu,
    transposed_conv2d,
)

__all__ = [
    "BN_EPS",
    "WeightStore",
    "FoldedNetwork",
    "WeightError",
    "WeightFormatError",
    "FoldError",
    "parameter_names",
    "init_weights",
    "fold_batch_norm",
    "forward",
    "save_weights",
    "load_weights",
    "infer_image",
    "splitmix64",
    "fnv1a64",
]

# BN_EPS is re-exported here because folding and execution must agree on it.

_MAGIC = b"EDAW"
_VERSION = 1


class WeightError(KeyError):
    """A parameter tensor the network needs is absent (or left dangling)."""


class WeightFormatError(ValueError):
    """Corrupt or unsupported .edaw file."""


class FoldError(ValueError):
    """BN folding is impossible for the given structure."""


class WeightStore:
    """Insertion-ordered map from parameter names to float32 arrays."""

    def __init__(self, tensors: dict | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, arr in tensors.items():
                self[name] = arr

    def __setitem__(self, name: str, arr) -> None:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.flags.writeable = False
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise WeightError(f"missing weight {name!r}")

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(a, other._tensors[n]) for n, a in self._tensors.items()
        )


@dataclass(frozen=True)
class FoldedNetwork:
    """A network with every BN merged away plus its rewritten weights."""

    net: NetworkSpec
    weights: WeightStore


# ---------------------------------------------------------------------------
# deterministic initialization

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def fnv1a64(data: str | bytes) -> int:
    """FNV-1a 64-bit hash."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _draw_uniform(tensor_name: str, seed: int, shape: tuple, bound: float) -> np.ndarray:
    """splitmix64 stream seeded per tensor; each draw's top 24 bits map
    linearly onto [-bound, bound]."""
    state0 = np.uint64((seed ^ fnv1a64(tensor_name)) & _MASK64)
    n = int(np.prod(shape))
    with np.errstate(over="ignore"):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = state0 + idx * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    top24 = (z >> np.uint64(40)).astype(np.float64)
    vals = (top24 * (2.0 / (2**24 - 1)) - 1.0) * bound
    return vals.astype(np.float32).reshape(shape)


def parameter_names(net: NetworkSpec) -> list:
    """Every weight name the network consumes, in execution order; each
    appears exactly once."""
    names = []
    for layer in net.layers:
        for prim in iter_prims(expand_layer(layer)):
            if isinstance(prim, ConvStep):
                names.append(f"{prim.name}.w")
                if prim.bias:
                    names.append(f"{prim.name}.b")
            elif isinstance(prim, DeconvStep):
                names.append(f"{prim.name}.w")
                if prim.bias:
                    names.append(f"{prim.name}.b")
            elif isinstance(prim, BnStep):
                names += [
                    f"{prim.name}.gamma",
                    f"{prim.name}.beta",
                    f"{prim.name}.mean",
                    f"{prim.name}.var",
                ]
            elif isinstance(prim, AffineStep):
                names += [f"{prim.name}.scale", f"{prim.name}.shift"]
    return names


def init_weights(net: NetworkSpec, seed: int) -> WeightStore:
    """Deterministic, platform-independent initialization.

    Convolution weights draw uniformly from [-b, b], b = sqrt(6 / fan_in)
    with fan_in = in_channels * kh * kw; biases start at zero; BN starts as
    the identity transform (gamma 1, beta 0, mean 0, var 1)."""
    store = WeightStore()
    seed &= _MASK64
    for layer in net.layers:
        for prim in iter_prims(expand_layer(layer)):
            if isinstance(prim, ConvStep):
                shape = (prim.out_ch, prim.in_ch, prim.kh, prim.kw)
                bound = math.sqrt(6.0 / (prim.in_ch * prim.kh * prim.kw))
                store[f"{prim.name}.w"] = _draw_uniform(
                    f"{prim.name}.w", seed, shape, bound
                )
                if prim.bias:
                    store[f"{prim.name}.b"] = np.zeros(prim.out_ch, np.float32)
            elif isinstance(prim, DeconvStep):
                shape = (prim.out_ch, prim.in_ch, prim.k, prim.k)
                bound = math.sqrt(6.0 / (prim.in_ch * prim.k * prim.k))
                store[f"{prim.name}.w"] = _draw_uniform(
                    f"{prim.name}.w", seed, shape, bound
                )
                if prim.bias:
                    store[f"{prim.name}.b"] = np.zeros(prim.out_ch, np.float32)
            elif isinstance(prim, BnStep):
                c = prim.channels
                store[f"{prim.name}.gamma"] = np.ones(c, np.float32)
                store[f"{prim.name}.beta"] = np.zeros(c, np.float32)
                store[f"{prim.name}.mean"] = np.zeros(c, np.float32)
                store[f"{prim.name}.var"] = np.ones(c, np.float32)
            elif isinstance(prim, AffineStep):
                c = prim.channels
                store[f"{prim.name}.scale"] = np.ones(c, np.float32)
                store[f"{prim.name}.shift"] = np.zeros(c, np.float32)
    return store


# ---------------------------------------------------------------------------
# BN folding

def _bn_scale_shift(src: WeightStore, bn: BnStep, lo: int, hi: int):
    gamma = src[f"{bn.name}.gamma"][lo:hi]
    beta = src[f"{bn.name}.beta"][lo:hi]
    mean = src[f"{bn.name}.mean"][lo:hi]
    var = src[f"{bn.name}.var"][lo:hi]
    s = gamma / np.sqrt(var + np.float32(BN_EPS))
    return s, beta, mean


def _fold_conv_bn(conv, bn: BnStep, src: WeightStore, dst: WeightStore,
                  lo: int = 0, hi: int | None = None) -> None:
    out_ch = conv.out_ch
    hi = out_ch + lo if hi is None else hi
    s, beta, mean = _bn_scale_shift(src, bn, lo, hi)
    w = src[f"{conv.name}.w"]
    old_b = src[f"{conv.name}.b"] if conv.bias else np.zeros(out_ch, np.float32)
    dst[f"{conv.name}.w"] = w * s[:, None, None, None]
    dst[f"{conv.name}.b"] = s * (old_b - mean) + beta


def _copy_prim(prim, src: WeightStore, dst: WeightStore) -> None:
    if isinstance(prim, (ConvStep, DeconvStep)):
        dst[f"{prim.name}.w"] = src[f"{prim.name}.w"]
        if prim.bias:
            dst[f"{prim.name}.b"] = src[f"{prim.name}.b"]
    elif isinstance(prim, AffineStep):
        dst[f"{prim.name}.scale"] = src[f"{prim.name}.scale"]
        dst[f"{prim.name}.shift"] = src[f"{prim.name}.shift"]


def _fold_parallel_bn(par: Parallel, bn: BnStep, src: WeightStore,
                      dst: WeightStore, layer_name: str) -> None:
    """A BN after a concat splits per channel slice: convolution branches
    absorb their slice, a pooling branch keeps its slice as scale+shift."""
    in_width = None
    for branch in par.branches:
        convs = [p for p in iter_prims(branch) if isinstance(p, (ConvStep, DeconvStep))]
        if convs:
            in_width = convs[0].in_ch
            break
    if in_width is None:
        raise FoldError(f"{bn.name}: no convolution branch to absorb the fold")
    offset = 0
    for branch in par.branches:
        prims = list(iter_prims(branch))
        convs = [p for p in prims if isinstance(p, (ConvStep, DeconvStep))]
        if convs:
            if len(convs) != 1 or not isinstance(prims[-1], (ConvStep, DeconvStep)):
                raise FoldError(
                    f"{bn.name}: unsupported branch structure for folding"
                )
            conv = convs[0]
            _fold_conv_bn(conv, bn, src, dst, lo=offset, hi=offset + conv.out_ch)
            offset += conv.out_ch
        else:
            s, beta, mean = _bn_scale_shift(src, bn, offset, offset + in_width)
            dst[f"{layer_name}.pool_affine.scale"] = s
            dst[f"{layer_name}.pool_affine.shift"] = beta - s * mean
            offset += in_width


def _fold_node(node, src: WeightStore, dst: WeightStore, layer_name: str) -> None:
    if isinstance(node, Chain):
        steps = node.steps
        i = 0
        while i < len(steps):
            step = steps[i]
            nxt = steps[i + 1] if i + 1 < len(steps) else None
            if isinstance(step, (ConvStep, DeconvStep)) and isinstance(nxt, BnStep):
                _fold_conv_bn(step, nxt, src, dst)
                i += 2
                continue
            if isinstance(step, Parallel) and isinstance(nxt, BnStep):
                _fold_parallel_bn(step, nxt, src, dst, layer_name)
                i += 2
                continue
            if isinstance(step, BnStep):
                raise FoldError(
                    f"{step.name}: batch norm without a directly preceding "
                    "convolution"
                )
            _fold_node(step, src, dst, layer_name)
            i += 1
    elif isinstance(node, Parallel):
        for branch in node.branches:
            _fold_node(branch, src, dst, layer_name)
    elif isinstance(node, (Residual, DenseConcat)):
        _fold_node(node.body, src, dst, layer_name)
    else:
        _copy_prim(node, src, dst)


def fold_batch_norm(net: NetworkSpec, weights: WeightStore) -> FoldedNetwork:
    """Merge every BN into its producing convolution: with
    s = gamma / sqrt(var + eps), the convolution's weights become s*w and
    its bias s*(old_bias - mean) + beta.  The returned network contains no
    BN steps and computes the same function up to float32 rounding."""
    dst = WeightStore()
    for layer in net.layers:
        _fold_node(expand_layer(layer), weights, dst, layer.name)
    folded_net = NetworkSpec(
        name=net.name,
        classes=net.classes,
        layers=[fold_layer(l) for l in net.layers],
        train_size=net.train_size,
        inference_upscale=net.inference_upscale,
    )
    for layer in folded_net.layers:
        for prim in iter_prims(expand_layer(layer)):
            if isinstance(prim, BnStep):
                raise FoldError(f"fold left a batch norm behind: {prim.name}")
    expected = parameter_names(folded_net)
    if dst.names() != expected:
        raise FoldError("folded weight names diverge from the folded network")
    return FoldedNetwork(folded_net, dst)


# ---------------------------------------------------------------------------
# executor

def _fetch(store: WeightStore, name: str, shape: tuple, used: list) -> np.ndarray:
    arr = store[name]
    if arr.shape != shape:
        raise ShapeError(
            f"weight {name!r} has shape {arr.shape}, expected {shape}"
        )
    used.append(name)
    return arr


def _eval(node, x: Tensor, store: WeightStore, used: list, ref_hw=None) -> Tensor:
    if isinstance(node, Chain):
        for step in node.steps:
            x = _eval(step, x, store, used, ref_hw)
        return x
    if isinstance(node, Parallel):
        hw = (x.h, x.w)
        out = None
        for branch in node.branches:
            y = _eval(branch, x, store, used, ref_hw=hw)
            out = y if out is None else concat_channels(out, y)
        return out
    if isinstance(node, Residual):
        return add(x, _eval(node.body, x, store, used, ref_hw))
    if isinstance(node, DenseConcat):
        return concat_channels(x, _eval(node.body, x, store, used, ref_hw))
    if isinstance(node, ConvStep):
        w = _fetch(store, f"{node.name}.w",
                   (node.out_ch, node.in_ch, node.kh, node.kw), used)
        b = _fetch(store, f"{node.name}.b", (node.out_ch,), used) if node.bias else None
        return conv2d(x, Kernel(w, b), stride=node.stride, dilation=node.dilation,
                      pad_h=node.pad_h, pad_w=node.pad_w)
    if isinstance(node, DeconvStep):
        w = _fetch(store, f"{node.name}.w",
                   (node.out_ch, node.in_ch, node.k, node.k), used)
        b = _fetch(store, f"{node.name}.b", (node.out_ch,), used) if node.bias else None
        return transposed_conv2d(x, Kernel(w, b), stride=node.stride)
    if isinstance(node, BnStep):
        p = BnParams(
            gamma=_fetch(store, f"{node.name}.gamma", (node.channels,), used),
            beta=_fetch(store, f"{node.name}.beta", (node.channels,), used),
            running_mean=_fetch(store, f"{node.name}.mean", (node.channels,), used),
            running_var=_fetch(store, f"{node.name}.var", (node.channels,), used),
            eps=BN_EPS,
        )
        return batch_norm(x, p)
    if isinstance(node, AffineStep):
        scale = _fetch(store, f"{node.name}.scale", (node.channels,), used)
        shift = _fetch(store, f"{node.name}.shift", (node.channels,), used)
        return channel_affine(x, scale, shift)
    if isinstance(node, ReluStep):
        return relu(x)
    if isinstance(node, DropoutStep):
        return x
    if isinstance(node, MaxPoolStep):
        return max_pool2d(x, node.k, node.stride, node.pad)
    if isinstance(node, AvgPoolStep):
        return avg_pool2d(x, node.k, node.stride)
    if isinstance(node, GlobalAvgPoolStep):
        return global_avg_pool(x)
    if isinstance(node, UpsampleStep):
        return bilinear_resize(x, x.h * node.factor, x.w * node.factor)
    if isinstance(node, ResizeToInputStep):
        if ref_hw is None:
            raise ShapeError("resize-to-input step outside a branch context")
        return bilinear_resize(x, ref_hw[0], ref_hw[1])
    raise TypeError(f"unknown node {node!r}")


def forward(net: NetworkSpec, weights: WeightStore, input: Tensor) -> Tensor:
    """Execute the network on one tensor.  Every stored parameter must be
    consumed exactly once; a missing or dangling weight is an error naming
    the offender."""
    div = spatial_divisor(net)
    if input.h % div or input.w % div:
        raise ShapeError(
            f"input {input.h}x{input.w} not divisible by the network's "
            f"downsampling factor {div}"
        )
    used: list = []
    x = input
    for layer in net.layers:
        try:
            x = _eval(expand_layer(layer), x, weights, used)
        except (WeightError, ShapeError) as exc:
            raise type(exc)(f"layer {layer.name!r}: {exc}") from None
    used_set = set(used)
    dangling = [n for n in weights.names() if n not in used_set]
    if dangling:
        raise WeightError(
            f"weights never consumed by the forward pass: {dangling[:3]}"
            + ("..." if len(dangling) > 3 else "")
        )
    return x


def infer_image(
    net: NetworkSpec, weights: WeightStore, image: Tensor, fold: bool = False
) -> LabelMap:
    """End-to-end inference: forward pass (optionally BN-folded), bilinear
    upscale of the logits by the network's inference factor, then per-pixel
    channel argmax."""
    if image.n != 1:
        raise ShapeError(f"inference expects batch size 1, got {image.n}")
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(
            f"image values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]"
        )
    if fold:
        folded = fold_batch_norm(net, weights)
        net, weights = folded.net, folded.weights
    logits = forward(net, weights, image)
    u = net.inference_upscale
    if u > 1:
        logits = bilinear_resize(logits, logits.h * u, logits.w * u)
    return argmax_channels(logits)


# ---------------------------------------------------------------------------
# on-disk format

def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(store))


def serialize_weights(store: WeightStore) -> bytes:
    out = [_MAGIC, struct.pack("<III", _VERSION, len(store), 0)]
    for name, arr in store.items():
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BB", 0, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(out)


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())


def deserialize_weights(data: bytes) -> WeightStore:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(
                f"truncated file: needed {n} bytes at offset {pos}"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != _MAGIC:
        raise WeightFormatError("bad magic: not an .edaw weight file")
    version, count, _reserved = struct.unpack("<III", take(12))
    if version != _VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    store = WeightStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        dtype, ndims = struct.unpack("<BB", take(2))
        if dtype != 0:
            raise WeightFormatError(f"unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{ndims}I", take(4 * ndims)) if ndims else ()
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = take(4 * n_elem)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if name in store:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        store[name] = arr
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after last entry")
    return store
