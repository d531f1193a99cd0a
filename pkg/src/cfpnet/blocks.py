"""Composite building blocks of the segmentation network.

Covers the dilated feature-pyramid channel, its grouping into the
channel-wise pyramid module (hierarchical fusion plus residual), the
ENet-style strided downsampler, and raw-image injection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    avgpool,
    batch_norm,
    concat_channels,
    conv2d,
    maxpool2x2,
    prelu,
)

PRELU_INIT = 0.25


def he_normal(rng, shape, fan_in, dtype=np.float32):
    scale = np.sqrt(2.0 / max(1, fan_in))
    return (rng.standard_normal(shape) * scale).astype(dtype)


def dilation_schedule(peak_rate, num_channels=4):
    """Per-channel dilation rates rising from 1 to the peak rate.

    For the standard four-channel layout the middle rates are peak/4 and
    peak/2, clamped to 1 when the quotient drops below 1. Other channel
    counts interpolate geometrically between 1 and the peak.
    """
    if peak_rate < 1:
        raise ValueError(f"peak dilation rate must be >= 1, got {peak_rate}")
    if num_channels < 1:
        raise ValueError(f"channel count must be >= 1, got {num_channels}")
    if num_channels == 1:
        return [peak_rate]
    if num_channels == 4:
        rates = [1, peak_rate // 4, peak_rate // 2, peak_rate]
    else:
        rates = [round(peak_rate ** (i / (num_channels - 1)))
                 for i in range(num_channels)]
        rates[-1] = peak_rate
    rates = [max(1, r) for r in rates]
    for i in range(1, len(rates)):
        rates[i] = max(rates[i], rates[i - 1])
    return rates


@dataclass(frozen=True)
class FPChannelConfig:
    """Widths and dilation for one feature-pyramid channel.

    ``block_widths`` are the three asymmetric-block output widths; the
    quarter/quarter/half split keeps the concatenated output equal to the
    channel's input width.
    """

    in_width: int
    block_widths: tuple
    dilation: int

    def __post_init__(self):
        if self.in_width < 1:
            raise ValueError("in_width must be positive")
        if len(self.block_widths) != 3 or any(w < 1 for w in self.block_widths):
            raise ValueError(f"block_widths must be three positive ints, got {self.block_widths}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @classmethod
    def from_width(cls, width, dilation):
        if width % 4:
            raise ValueError(f"channel width must be divisible by 4, got {width}")
        return cls(width, (width // 4, width // 4, width // 2), dilation)

    @property
    def out_width(self):
        return sum(self.block_widths)


@dataclass(frozen=True)
class CFPModuleConfig:
    """Module width M, channel count K, and the derived dilation schedule."""

    width: int
    peak_dilation: int
    num_channels: int = 4

    def __post_init__(self):
        if self.num_channels < 1:
            raise ValueError("num_channels must be >= 1")
        if self.peak_dilation < 1:
            raise ValueError("peak_dilation must be >= 1")
        if self.width < 1 or self.width % (4 * self.num_channels):
            raise ValueError(
                f"module width {self.width} must be a positive multiple of "
                f"4 * num_channels = {4 * self.num_channels}")

    @property
    def branch_width(self):
        return self.width // self.num_channels

    @property
    def dilations(self):
        return dilation_schedule(self.peak_dilation, self.num_channels)


@dataclass(frozen=True)
class DownsamplerConfig:
    """Channel split for the parallel conv + max-pool downsampler."""

    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.out_channels <= self.in_channels:
            raise ValueError(
                f"out_channels ({self.out_channels}) must exceed in_channels "
                f"({self.in_channels}) so the conv branch has >= 1 filter")

    @property
    def conv_filters(self):
        return self.out_channels - self.in_channels


class ConvUnit:
    """Convolution with optional batch norm and PReLU.

    Convolutions feeding a batch norm carry no bias; the affine shift of the
    norm makes it redundant.
    """

    def __init__(self, spec, rng, bn=True, act=True, dtype=np.float32):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        self.weight = Tensor(he_normal(rng, (spec.out_channels, spec.in_channels,
                                             spec.kernel_h, spec.kernel_w),
                                       fan_in, dtype))
        self.bias = Tensor(np.zeros(spec.out_channels, dtype)) if spec.has_bias else None
        self.has_bn = bn
        if bn:
            self.gamma = Tensor(np.ones(spec.out_channels, dtype))
            self.beta = Tensor(np.zeros(spec.out_channels, dtype))
            self.running_mean = np.zeros(spec.out_channels, dtype)
            self.running_var = np.ones(spec.out_channels, dtype)
        self.alpha = Tensor(np.full(spec.out_channels, PRELU_INIT, dtype)) if act else None

    def forward(self, x, tape=None, mode="infer"):
        y = conv2d(x, self.weight, self.bias, self.spec, tape)
        if self.has_bn:
            y = batch_norm(y, self.gamma, self.beta, self.running_mean,
                           self.running_var, mode=mode, tape=tape)
        if self.alpha is not None:
            y = prelu(y, self.alpha, tape)
        return y

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        if self.has_bn:
            yield f"{prefix}.gamma", self.gamma
            yield f"{prefix}.beta", self.beta
        if self.alpha is not None:
            yield f"{prefix}.alpha", self.alpha

    def named_buffers(self, prefix):
        if self.has_bn:
            yield f"{prefix}.running_mean", self.running_mean
            yield f"{prefix}.running_var", self.running_var


class FPChannel:
    """Three stacked asymmetric dilated blocks with concatenated outputs.

    Each block is a dilated 3x1 conv then a dilated 1x3 conv, both followed
    by batch norm and PReLU; blocks run in sequence and their outputs are
    concatenated, emulating 3x3/5x5/7x7 kernels in one path.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        in_widths = (cfg.in_width, cfg.block_widths[0], cfg.block_widths[1])
        self.blocks = []
        for cin, cout in zip(in_widths, cfg.block_widths):
            vert = ConvUnit(ConvSpec.same(3, 1, cin, cout, dilation=cfg.dilation),
                            rng, dtype=dtype)
            horz = ConvUnit(ConvSpec.same(1, 3, cout, cout, dilation=cfg.dilation),
                            rng, dtype=dtype)
            self.blocks.append((vert, horz))

    def forward(self, x, tape=None, mode="infer"):
        if x.shape[1] != self.cfg.in_width:
            raise ShapeError(
                f"fp channel expects {self.cfg.in_width} input channels, got {x.shape[1]}")
        outs = []
        h = x
        for vert, horz in self.blocks:
            h = horz.forward(vert.forward(h, tape, mode), tape, mode)
            outs.append(h)
        return concat_channels(outs, tape)

    def named_parameters(self, prefix):
        for i, (vert, horz) in enumerate(self.blocks):
            yield from vert.named_parameters(f"{prefix}.block{i}.v")
            yield from horz.named_parameters(f"{prefix}.block{i}.h")

    def named_buffers(self, prefix):
        for i, (vert, horz) in enumerate(self.blocks):
            yield from vert.named_buffers(f"{prefix}.block{i}.v")
            yield from horz.named_buffers(f"{prefix}.block{i}.h")


def hff_fuse(features, tape=None):
    """Hierarchical feature fusion: running prefix sums, then concatenation.

    Output block i equals f_1 + ... + f_i; the stepwise summation suppresses
    the gridding artifacts of sparse dilated sampling.
    """
    if not features:
        raise ShapeError("hff_fuse needs at least one feature map")
    fused = [features[0]]
    for f in features[1:]:
        fused.append(add(fused[-1], f, tape))
    return concat_channels(fused, tape)


class CFPModule:
    """K parallel dilated feature-pyramid branches wrapped in a residual.

    Each branch reduces the module width M to M/K with its own 1x1 conv
    (per-branch reduction; the parameter report documents this counting
    convention), runs a dilated FP channel, then the branch outputs are
    hierarchically fused, projected back to M by a 1x1 conv with batch
    norm, added to the module input, and passed through a final PReLU.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        bw = cfg.branch_width
        self.reductions = [
            ConvUnit(ConvSpec.same(1, 1, cfg.width, bw), rng, dtype=dtype)
            for _ in range(cfg.num_channels)
        ]
        self.channels = [
            FPChannel(FPChannelConfig.from_width(bw, rate), rng, dtype=dtype)
            for rate in cfg.dilations
        ]
        self.projection = ConvUnit(ConvSpec.same(1, 1, cfg.width, cfg.width),
                                   rng, act=False, dtype=dtype)
        self.out_alpha = Tensor(np.full(cfg.width, PRELU_INIT, dtype))

    def forward(self, x, tape=None, mode="infer"):
        if x.shape[1] != self.cfg.width:
            raise ShapeError(
                f"cfp module expects {self.cfg.width} input channels, got {x.shape[1]}")
        feats = [channel.forward(reduce.forward(x, tape, mode), tape, mode)
                 for reduce, channel in zip(self.reductions, self.channels)]
        fused = hff_fuse(feats, tape)
        projected = self.projection.forward(fused, tape, mode)
        return prelu(add(projected, x, tape), self.out_alpha, tape)

    def named_parameters(self, prefix):
        for i, reduce in enumerate(self.reductions):
            yield from reduce.named_parameters(f"{prefix}.reduce{i}")
        for i, channel in enumerate(self.channels):
            yield from channel.named_parameters(f"{prefix}.channel{i}")
        yield from self.projection.named_parameters(f"{prefix}.project")
        yield f"{prefix}.alpha", self.out_alpha

    def named_buffers(self, prefix):
        for i, reduce in enumerate(self.reductions):
            yield from reduce.named_buffers(f"{prefix}.reduce{i}")
        for i, channel in enumerate(self.channels):
            yield from channel.named_buffers(f"{prefix}.channel{i}")
        yield from self.projection.named_buffers(f"{prefix}.project")


class Downsampler:
    """Parallel 3x3 stride-2 conv and 2x2 max pool, concatenated.

    The conv branch carries out_channels - in_channels filters and the pool
    branch passes all input channels through (ENet initial-block split).
    Batch norm and PReLU follow the concatenation.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        spec = ConvSpec(3, 3, cfg.in_channels, cfg.conv_filters,
                        stride=2, padding_h=1, padding_w=1)
        self.conv = ConvUnit(spec, rng, bn=False, act=False, dtype=dtype)
        self.gamma = Tensor(np.ones(cfg.out_channels, dtype))
        self.beta = Tensor(np.zeros(cfg.out_channels, dtype))
        self.running_mean = np.zeros(cfg.out_channels, dtype)
        self.running_var = np.ones(cfg.out_channels, dtype)
        self.alpha = Tensor(np.full(cfg.out_channels, PRELU_INIT, dtype))

    def forward(self, x, tape=None, mode="infer"):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"downsampler expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(
                f"downsampler needs even spatial extents, got {x.shape[2]}x{x.shape[3]}")
        y = concat_channels([self.conv.forward(x, tape, mode), maxpool2x2(x, tape)],
                            tape)
        y = batch_norm(y, self.gamma, self.beta, self.running_mean,
                       self.running_var, mode=mode, tape=tape)
        return prelu(y, self.alpha, tape)

    def named_parameters(self, prefix):
        yield from self.conv.named_parameters(f"{prefix}.conv")
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta
        yield f"{prefix}.alpha", self.alpha

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def inject_input(features, raw_image, factor, tape=None):
    """Concatenate an average-pooled copy of the raw image onto the features."""
    pooled = avgpool(raw_image, factor, tape)
    if (features.shape[0] != pooled.shape[0]
            or features.shape[2:] != pooled.shape[2:]):
        raise ShapeError(
            f"injection mismatch: features {features.shape} vs pooled image "
            f"{pooled.shape} (factor {factor})")
    return concat_channels([features, pooled], tape)
