"""Composite block constructors.

Each constructor expands one architectural block (dense asymmetric module,
non-asymmetric variant, residual module, downsampling block, spatial pyramid,
projection) into a tree of primitive steps.  The tree is what the analyzer
walks and the executor interprets; its leaves carry the names under which
weights live in a WeightStore (``<block>.<step>.<param>``).

Structure nodes:

* ``Chain``        run items in sequence
* ``Parallel``     run every branch on the same input, concatenate outputs
                   in branch order
* ``Residual``     add the node input to the body output
* ``DenseConcat``  concatenate the node input (channels first) with the
                   body output
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union

__all__ = [
    "BlockSpec",
    "ConvStep",
    "DeconvStep",
    "BnStep",
    "AffineStep",
    "ReluStep",
    "DropoutStep",
    "MaxPoolStep",
    "AvgPoolStep",
    "GlobalAvgPoolStep",
    "UpsampleStep",
    "ResizeToInputStep",
    "Chain",
    "Parallel",
    "Residual",
    "DenseConcat",
    "iter_prims",
    "make_eda_module",
    "make_non_asym_module",
    "make_erf_module",
    "make_downsampling_block",
    "make_aspp",
    "make_projection",
    "GROWTH_RATE",
    "DROPOUT_RATE",
]

# Architecture-wide constants: growth rate of the dense modules and the
# (training-only) dropout rate carried in block metadata.
GROWTH_RATE = 40
DROPOUT_RATE = 0.02


@dataclass(frozen=True)
class ConvStep:
    name: str
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int = 1
    dilation: int = 1
    pad_h: int = 0
    pad_w: int = 0
    bias: bool = False


@dataclass(frozen=True)
class DeconvStep:
    name: str
    in_ch: int
    out_ch: int
    k: int
    stride: int
    bias: bool = False


@dataclass(frozen=True)
class BnStep:
    name: str
    channels: int


@dataclass(frozen=True)
class AffineStep:
    """Per-channel scale+shift; appears only in folded networks where a BN
    slice had no convolution branch to merge into."""

    name: str
    channels: int


@dataclass(frozen=True)
class ReluStep:
    pass


@dataclass(frozen=True)
class DropoutStep:
    """Training-only regularization marker; identity at inference."""

    rate: float


@dataclass(frozen=True)
class MaxPoolStep:
    k: int
    stride: int
    pad: int = 0


@dataclass(frozen=True)
class AvgPoolStep:
    k: int
    stride: int


@dataclass(frozen=True)
class GlobalAvgPoolStep:
    pass


@dataclass(frozen=True)
class UpsampleStep:
    """Bilinear upsample by an integer factor."""

    factor: int


@dataclass(frozen=True)
class ResizeToInputStep:
    """Bilinear resize back to the spatial size of the enclosing branch
    point (used by the pyramid's image-pooling branch)."""


@dataclass(frozen=True)
class Chain:
    steps: tuple

    def __init__(self, steps):
        object.__setattr__(self, "steps", tuple(steps))


@dataclass(frozen=True)
class Parallel:
    branches: tuple

    def __init__(self, branches):
        object.__setattr__(self, "branches", tuple(branches))


@dataclass(frozen=True)
class Residual:
    body: "Node"


@dataclass(frozen=True)
class DenseConcat:
    body: "Node"


Node = Union[
    Chain, Parallel, Residual, DenseConcat,
    ConvStep, DeconvStep, BnStep, AffineStep, ReluStep, DropoutStep,
    MaxPoolStep, AvgPoolStep, GlobalAvgPoolStep, UpsampleStep, ResizeToInputStep,
]


def iter_prims(node: Node) -> Iterator:
    """Yield primitive steps depth-first in execution order."""
    if isinstance(node, Chain):
        for s in node.steps:
            yield from iter_prims(s)
    elif isinstance(node, Parallel):
        for b in node.branches:
            yield from iter_prims(b)
    elif isinstance(node, (Residual, DenseConcat)):
        yield from iter_prims(node.body)
    else:
        yield node


@dataclass(frozen=True)
class BlockSpec:
    """Validated hyperparameters of one composite block."""

    kind: str
    in_channels: int
    out_channels: int
    growth: int = 0
    dilation: int = 1
    dropout_rate: float = DROPOUT_RATE

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"{self.kind}: channel counts must be >= 1")
        if self.dilation < 1:
            raise ValueError(f"{self.kind}: dilation must be >= 1")
        if self.kind in ("eda", "eda_non_asym"):
            if self.growth < 1:
                raise ValueError(f"{self.kind}: growth must be >= 1")
            if self.out_channels != self.in_channels + self.growth:
                raise ValueError(
                    f"{self.kind}: out_channels must equal in_channels + growth"
                )
        elif self.kind == "erf":
            if self.out_channels != self.in_channels:
                raise ValueError("erf: residual module must preserve width")
        elif self.kind == "downsample":
            if self.in_channels == self.out_channels:
                raise ValueError("downsample: in_channels == out_channels is undefined")


def _same_pad(kh: int, kw: int, dilation: int) -> tuple[int, int]:
    return dilation * (kh - 1) // 2, dilation * (kw - 1) // 2


def _conv_bn_relu(
    name: str,
    conv_tag: str,
    bn_tag: str,
    in_ch: int,
    out_ch: int,
    kh: int,
    kw: int,
    stride: int = 1,
    dilation: int = 1,
    folded: bool = False,
) -> list:
    """Post-activation composite: conv, BN, ReLU.  The BN absorbs the conv
    bias, so the conv is biasless until folding rewrites it."""
    pad_h, pad_w = _same_pad(kh, kw, dilation)
    conv = ConvStep(
        f"{name}.{conv_tag}", in_ch, out_ch, kh, kw,
        stride=stride, dilation=dilation, pad_h=pad_h, pad_w=pad_w, bias=folded,
    )
    if folded:
        return [conv, ReluStep()]
    return [conv, BnStep(f"{name}.{bn_tag}", out_ch), ReluStep()]


def make_eda_module(
    in_ch: int, growth: int, dilation: int, name: str = "eda", folded: bool = False
) -> Node:
    """Dense module: 1x1 reduction to the growth width, two asymmetric
    pairs (3x1 then 1x3), dilation on the second pair only, and channel
    concatenation of the module input with the new features."""
    BlockSpec("eda", in_ch, in_ch + growth, growth=growth, dilation=dilation)
    g = growth
    steps = (
        _conv_bn_relu(name, "conv1x1", "bn1", in_ch, g, 1, 1, folded=folded)
        + _conv_bn_relu(name, "conv3x1a", "bn2", g, g, 3, 1, folded=folded)
        + _conv_bn_relu(name, "conv1x3a", "bn3", g, g, 1, 3, folded=folded)
        + _conv_bn_relu(name, "conv3x1b", "bn4", g, g, 3, 1, dilation=dilation, folded=folded)
        + _conv_bn_relu(name, "conv1x3b", "bn5", g, g, 1, 3, dilation=dilation, folded=folded)
        + [DropoutStep(DROPOUT_RATE)]
    )
    return DenseConcat(Chain(steps))


def make_non_asym_module(
    in_ch: int, growth: int, dilation: int, name: str = "eda_na", folded: bool = False
) -> Node:
    """Dense module variant with the asymmetric pairs replaced by two full
    3x3 convolutions (the second dilated)."""
    BlockSpec("eda_non_asym", in_ch, in_ch + growth, growth=growth, dilation=dilation)
    g = growth
    steps = (
        _conv_bn_relu(name, "conv1x1", "bn1", in_ch, g, 1, 1, folded=folded)
        + _conv_bn_relu(name, "conv3x3a", "bn2", g, g, 3, 3, folded=folded)
        + _conv_bn_relu(name, "conv3x3b", "bn3", g, g, 3, 3, dilation=dilation, folded=folded)
        + [DropoutStep(DROPOUT_RATE)]
    )
    return DenseConcat(Chain(steps))


def make_erf_module(
    width: int, dilation: int, name: str = "erf", folded: bool = False
) -> Node:
    """Residual module at constant width: two asymmetric pairs, no
    point-wise reduction, input added to the output, ReLU after the add."""
    BlockSpec("erf", width, width, dilation=dilation)
    steps = (
        _conv_bn_relu(name, "conv3x1a", "bn1", width, width, 3, 1, folded=folded)
        + _conv_bn_relu(name, "conv1x3a", "bn2", width, width, 1, 3, folded=folded)
        + _conv_bn_relu(name, "conv3x1b", "bn3", width, width, 3, 1, dilation=dilation, folded=folded)
        + _conv_bn_relu(name, "conv1x3b", "bn4", width, width, 1, 3, dilation=dilation, folded=folded)
        + [DropoutStep(DROPOUT_RATE)]
    )
    return Chain([Residual(Chain(steps)), ReluStep()])


def make_downsampling_block(
    in_ch: int, out_ch: int, name: str = "down", folded: bool = False
) -> Node:
    """Stride-2 stage.  Widening blocks run a 3x3/stride-2 convolution with
    out_ch - in_ch filters in parallel with a 2x2 max-pool and concatenate;
    narrowing blocks are a single 3x3/stride-2 convolution.  BN+ReLU apply
    once, after the merge."""
    BlockSpec("downsample", in_ch, out_ch)
    if out_ch < in_ch:
        conv = ConvStep(
            f"{name}.conv", in_ch, out_ch, 3, 3,
            stride=2, pad_h=1, pad_w=1, bias=folded,
        )
        if folded:
            return Chain([conv, ReluStep()])
        return Chain([conv, BnStep(f"{name}.bn", out_ch), ReluStep()])
    conv = ConvStep(
        f"{name}.conv", in_ch, out_ch - in_ch, 3, 3,
        stride=2, pad_h=1, pad_w=1, bias=folded,
    )
    pool: list = [MaxPoolStep(2, 2)]
    if folded:
        # The post-concat BN is per-channel, so it splits across the concat:
        # the conv branch absorbs its slice, the pool branch keeps its slice
        # as an explicit scale+shift.
        pool.append(AffineStep(f"{name}.pool_affine", in_ch))
        return Chain([Parallel([Chain([conv]), Chain(pool)]), ReluStep()])
    return Chain([
        Parallel([Chain([conv]), Chain(pool)]),
        BnStep(f"{name}.bn", out_ch),
        ReluStep(),
    ])


def make_aspp(
    in_ch: int, branch_ch: int, name: str = "aspp", folded: bool = False
) -> Node:
    """Spatial pyramid: 1x1 conv, three 3x3 convs at dilations 6/12/18, and
    an image-pooling branch (global average pool, 1x1 conv, bilinear resize
    back), concatenated and fused by a 1x1 conv."""
    if in_ch < 1 or branch_ch < 1:
        raise ValueError("aspp: channel counts must be >= 1")
    branches = [
        Chain(_conv_bn_relu(name, "b1_conv1x1", "b1_bn", in_ch, branch_ch, 1, 1, folded=folded)),
        Chain(_conv_bn_relu(name, "b2_conv3x3", "b2_bn", in_ch, branch_ch, 3, 3, dilation=6, folded=folded)),
        Chain(_conv_bn_relu(name, "b3_conv3x3", "b3_bn", in_ch, branch_ch, 3, 3, dilation=12, folded=folded)),
        Chain(_conv_bn_relu(name, "b4_conv3x3", "b4_bn", in_ch, branch_ch, 3, 3, dilation=18, folded=folded)),
        Chain(
            [GlobalAvgPoolStep()]
            + _conv_bn_relu(name, "b5_conv1x1", "b5_bn", in_ch, branch_ch, 1, 1, folded=folded)
            + [ResizeToInputStep()]
        ),
    ]
    fuse = _conv_bn_relu(
        name, "fuse_conv1x1", "fuse_bn", 5 * branch_ch, branch_ch, 1, 1, folded=folded
    )
    return Chain([Parallel(branches)] + fuse)


def make_projection(in_ch: int, classes: int, name: str = "proj") -> Node:
    """Final 1x1 convolution to class logits: biased, no BN, no ReLU."""
    if classes < 1:
        raise ValueError(f"classes must be >= 1, got {classes}")
    if in_ch < 1:
        raise ValueError(f"in_ch must be >= 1, got {in_ch}")
    return Chain([ConvStep(f"{name}.conv1x1", in_ch, classes, 1, 1, bias=True)])
