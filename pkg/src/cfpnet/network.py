"""Full network assembly, parameter accounting, and receptive-field analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .blocks import (
    CFPModule,
    CFPModuleConfig,
    ConvUnit,
    Downsampler,
    DownsamplerConfig,
    inject_input,
)
from .tensor import (
    ConvSpec,
    GradTape,
    ShapeError,
    Tensor,
    bilinear_upsample,
    spatial_pick,
)

INJECT_CHANNELS = 3  # RGB planes added at each injection point

# Reference totals (millions of parameters) the report compares against.
REFERENCE_PARAMS = {"v1": 0.31e6, "v2": 0.37e6, "v3": 0.55e6}


@dataclass(frozen=True)
class VariantSpec:
    """Repeat counts and dilation lists defining one network variant."""

    name: str
    cluster1_rates: tuple
    cluster2_rates: tuple
    init_channels: int = 32
    cluster_widths: tuple = (64, 128)
    num_classes: int = 19

    def __post_init__(self):
        if self.num_classes < 1 or self.num_classes > 254:
            raise ValueError(f"num_classes must be in [1, 254], got {self.num_classes}")
        if self.init_channels < 1:
            raise ValueError("init_channels must be positive")
        if len(self.cluster_widths) != 2 or any(w % 16 for w in self.cluster_widths):
            raise ValueError(
                f"cluster widths must be two multiples of 16, got {self.cluster_widths}")
        for rates in (self.cluster1_rates, self.cluster2_rates):
            if any((not isinstance(r, int)) or r < 1 for r in rates):
                raise ValueError(f"dilation rates must be positive ints, got {rates}")

    @classmethod
    def v1(cls, num_classes=19):
        return cls("v1", (4,), (8, 16), num_classes=num_classes)

    @classmethod
    def v2(cls, num_classes=19):
        return cls("v2", (2,), (4, 8, 16), num_classes=num_classes)

    @classmethod
    def v3(cls, num_classes=19):
        return cls("v3", (2, 2), (4, 4, 8, 8, 16, 16), num_classes=num_classes)

    @classmethod
    def preset(cls, name, num_classes=19):
        try:
            return {"v1": cls.v1, "v2": cls.v2, "v3": cls.v3}[name.lower()](num_classes)
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; expected v1, v2, or v3") from None

    def to_config(self):
        """Serialize as the plain key-value config format."""
        if self.name in ("v1", "v2", "v3"):
            return f"variant = {self.name}\nclasses = {self.num_classes}\n"
        return (
            "variant = custom\n"
            f"init_channels = {self.init_channels}\n"
            f"cluster1_rates = {', '.join(map(str, self.cluster1_rates))}\n"
            f"cluster2_rates = {', '.join(map(str, self.cluster2_rates))}\n"
            f"widths = {', '.join(map(str, self.cluster_widths))}\n"
            f"classes = {self.num_classes}\n"
        )

    @classmethod
    def from_config(cls, text):
        """Parse the plain key-value config format ('#' starts a comment)."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()

        def int_list(key):
            raw = values.get(key, "")
            return tuple(int(tok) for tok in raw.replace(",", " ").split())

        name = values.get("variant", "custom").lower()
        classes = int(values.get("classes", 19))
        if name in ("v1", "v2", "v3"):
            return cls.preset(name, classes)
        if name != "custom":
            raise ValueError(f"unknown variant {name!r} in config")
        return cls(
            "custom",
            int_list("cluster1_rates"),
            int_list("cluster2_rates"),
            init_channels=int(values.get("init_channels", 32)),
            cluster_widths=int_list("widths") or (64, 128),
            num_classes=classes,
        )


@dataclass
class LayerEntry:
    """One top-level layer of the assembled network."""

    name: str
    kind: str  # conv | downsample | cfp | inject | classifier | upsample
    layer: object = None
    mode_desc: str = ""
    label: str = ""
    out_channels: int = 0
    factor: int = 0  # pooling factor for inject, scale for upsample


class Network:
    """Ordered layer list with named parameter tensors."""

    def __init__(self, entries, variant=None):
        self.entries = list(entries)
        self.variant = variant
        self.input_mean = np.zeros(INJECT_CHANNELS, np.float32)

    @property
    def num_classes(self):
        return self.variant.num_classes if self.variant else 0

    def forward(self, image, mode="infer", tape=None):
        """Map an n x 3 x h x w image to n x num_classes x h x w scores."""
        if image.ndim != 4 or image.shape[1] != INJECT_CHANNELS:
            raise ShapeError(f"expected an n x 3 x h x w image, got shape {image.shape}")
        if image.shape[2] % 8 or image.shape[3] % 8:
            raise ShapeError(
                f"spatial extents must be divisible by 8, got "
                f"{image.shape[2]}x{image.shape[3]}")
        x = image
        for entry in self.entries:
            if entry.kind == "inject":
                x = inject_input(x, image, entry.factor, tape)
            elif entry.kind == "upsample":
                x = bilinear_upsample(x, entry.factor, tape)
            else:
                x = entry.layer.forward(x, tape=tape, mode=mode)
        return x

    def named_parameters(self):
        for entry in self.entries:
            if entry.layer is not None:
                yield from entry.layer.named_parameters(entry.name)

    def named_buffers(self):
        yield "input.mean", self.input_mean
        for entry in self.entries:
            if entry.layer is not None:
                yield from entry.layer.named_buffers(entry.name)

    def parameters(self):
        return [tensor for _, tensor in self.named_parameters()]


def build_network(spec, seed=0, dtype=np.float32):
    """Assemble the layer ladder for a variant.

    Channel bookkeeping for the default widths: 32 -> 35 (inject) -> 64
    (downsample) -> 67 (inject) -> 128 (downsample) -> 131 (inject) ->
    num_classes, with the classifier running at 1/8 resolution and a final
    bilinear x8 decoder.
    """
    rng = np.random.default_rng(seed)
    entries = []
    c = spec.init_channels
    entries.append(LayerEntry(
        "init0", "conv",
        ConvUnit(ConvSpec(3, 3, INJECT_CHANNELS, c, stride=2, padding_h=1, padding_w=1),
                 rng, dtype=dtype),
        "stride 2", "3×3 Conv", c))
    for i in (1, 2):
        entries.append(LayerEntry(
            f"init{i}", "conv",
            ConvUnit(ConvSpec.same(3, 3, c, c), rng, dtype=dtype),
            "stride 1", "3×3 Conv", c))

    entries.append(LayerEntry("inject1", "inject", None, "×2 avg pool",
                              "Injection", c + INJECT_CHANNELS, factor=2))
    c += INJECT_CHANNELS

    for stage, (width, rates, pool_factor) in enumerate(
            ((spec.cluster_widths[0], spec.cluster1_rates, 4),
             (spec.cluster_widths[1], spec.cluster2_rates, 8)), start=1):
        entries.append(LayerEntry(
            f"down{stage}", "downsample",
            Downsampler(DownsamplerConfig(c, width), rng, dtype=dtype),
            "-", "Downsampling", width))
        c = width
        for i, rate in enumerate(rates):
            entries.append(LayerEntry(
                f"cfp{stage}_{i}", "cfp",
                CFPModule(CFPModuleConfig(width, rate), rng, dtype=dtype),
                f"r_K = {rate}", "CFP", width))
        entries.append(LayerEntry(
            f"inject{stage + 1}", "inject", None, f"×{pool_factor} avg pool",
            "Injection", c + INJECT_CHANNELS, factor=pool_factor))
        c += INJECT_CHANNELS

    entries.append(LayerEntry(
        "classifier", "classifier",
        ConvUnit(ConvSpec(1, 1, c, spec.num_classes, has_bias=True),
                 rng, bn=False, act=False, dtype=dtype),
        "stride 1", "1×1 Conv", spec.num_classes))
    entries.append(LayerEntry(
        "upsample", "upsample", None, "×8", "Bilinear interpolation",
        spec.num_classes, factor=8))
    return Network(entries, spec)


def forward(net, image, mode="infer", tape=None):
    """Functional alias for :meth:`Network.forward`."""
    return net.forward(image, mode=mode, tape=tape)


@dataclass
class ParamRow:
    name: str
    kind: str
    conv_weights: int = 0
    biases: int = 0
    bn_affine: int = 0
    prelu: int = 0
    bn_buffers: int = 0

    @property
    def trained(self):
        return self.conv_weights + self.biases + self.bn_affine + self.prelu


@dataclass
class ParamReport:
    """Per-layer and total parameter/byte accounting.

    ``total_trained`` includes batch-norm affine and PReLU parameters;
    ``total_weights`` counts convolution weights and biases only. Running
    statistics are buffers, tracked separately and excluded from both.
    """

    rows: list = field(default_factory=list)

    @property
    def total_weights(self):
        return sum(r.conv_weights + r.biases for r in self.rows)

    @property
    def total_trained(self):
        return sum(r.trained for r in self.rows)

    @property
    def total_buffers(self):
        return sum(r.bn_buffers for r in self.rows)

    @property
    def size_bytes(self):
        return 4 * self.total_trained

    @property
    def size_mb(self):
        return self.size_bytes / 1e6


def count_parameters(net):
    """Exact integer parameter counts per top-level layer."""
    report = ParamReport()
    for entry in net.entries:
        if entry.layer is None:
            continue
        row = ParamRow(entry.name, entry.kind)
        for name, tensor in entry.layer.named_parameters(entry.name):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "weight":
                row.conv_weights += tensor.size
            elif leaf == "bias":
                row.biases += tensor.size
            elif leaf in ("gamma", "beta"):
                row.bn_affine += tensor.size
            elif leaf == "alpha":
                row.prelu += tensor.size
            else:
                raise AssertionError(f"unclassified parameter {name}")
        for name, buf in entry.layer.named_buffers(entry.name):
            row.bn_buffers += buf.size
        report.rows.append(row)
    return report


def effective_receptive_field(kernel, rate):
    """Side length r*(n - 1) + 1 of a dilated kernel's footprint."""
    if kernel < 1 or rate < 1:
        raise ValueError(f"kernel and rate must be >= 1, got ({kernel}, {rate})")
    return rate * (kernel - 1) + 1


def empirical_receptive_field(layer, input_shape, position, mode="infer"):
    """Input pixels with nonzero gradient from one output scalar.

    ``layer`` is either an object with ``forward(x, tape=..., mode=...)`` or
    a callable ``f(x, tape)``; ``position`` is (channel, row, col) of the
    probed output element in batch 0. Returns a set of (row, col) input
    positions.
    """
    x = Tensor(np.ones(input_shape, np.float64))
    tape = GradTape()
    if hasattr(layer, "forward"):
        y = layer.forward(x, tape=tape, mode=mode)
    else:
        y = layer(x, tape)
    channel, row, col = position
    scalar = spatial_pick(y, 0, channel, row, col, tape)
    tape.backward(scalar)
    mask = np.abs(x.grad).sum(axis=(0, 1)) > 0
    rows, cols = np.nonzero(mask)
    return set(zip(rows.tolist(), cols.tolist()))


def receptive_field_bbox(layer, input_shape, position, mode="infer"):
    """Bounding-box side lengths of the empirical gradient footprint."""
    points = empirical_receptive_field(layer, input_shape, position, mode)
    if not points:
        return (0, 0)
    rows = [p[0] for p in points]
    cols = [p[1] for p in points]
    return (max(rows) - min(rows) + 1, max(cols) - min(cols) + 1)


def _conv_cost(kernel_h, kernel_w, cin, cout):
    return Fraction(kernel_h * kernel_w * cin * cout)


def fp_channel_cost(width=16):
    """Conv-weight count of one feature-pyramid channel at the given width."""
    quarter, half = width // 4, width // 2
    return (_conv_cost(3, 1, width, quarter) + _conv_cost(1, 3, quarter, quarter)
            + _conv_cost(3, 1, quarter, quarter) + _conv_cost(1, 3, quarter, quarter)
            + _conv_cost(3, 1, quarter, half) + _conv_cost(1, 3, half, half))


def inception_v2_cost(width=16):
    """Three-branch stacked-3x3 module at the same width allocation.

    Branches emit width/4 (one 3x3), width/4 (two 3x3), and width/2 (three
    3x3), each fed from the full input width; stack-internal widths equal
    the branch output width.
    """
    quarter, half = width // 4, width // 2
    return (_conv_cost(3, 3, width, quarter)
            + _conv_cost(3, 3, width, quarter) + _conv_cost(3, 3, quarter, quarter)
            + _conv_cost(3, 3, width, half) + _conv_cost(3, 3, half, half)
            + _conv_cost(3, 3, half, half))


def factorization_savings(original_kernel, replacement):
    """Fraction of parameters saved by a factorized substitute at equal width.

    ``replacement`` is one of ``stacked_3x3`` (a ladder of (k-1)/2 3x3
    convs), ``asymmetric_pair`` (k x 1 then 1 x k), or ``fp_channel`` (the
    asymmetric pyramid channel versus the Inception-v2-style three-branch
    module). Returns an exact :class:`fractions.Fraction`.
    """
    k = original_kernel
    if replacement == "stacked_3x3":
        if k < 3 or k % 2 == 0:
            raise ValueError(f"stacked_3x3 replaces odd kernels >= 3, got {k}")
        return 1 - Fraction(9 * ((k - 1) // 2), k * k)
    if replacement == "asymmetric_pair":
        if k < 1:
            raise ValueError("kernel must be positive")
        return 1 - Fraction(2 * k, k * k)
    if replacement == "fp_channel":
        return 1 - fp_channel_cost() / inception_v2_cost()
    raise ValueError(f"unsupported replacement {replacement!r}")


def layer_table(net):
    """Architecture table: layer number, kind, mode, output channel count.

    Consecutive pyramid modules with the same dilation rate collapse into a
    single numbered range row; injection rows are unnumbered.
    """
    header = f"{'No.':<8}{'Layer':<26}{'Mode':<16}{'Dimension'}"
    lines = [header]
    entries = net.entries
    i = 0
    number = 1
    while i < len(entries):
        entry = entries[i]
        if entry.kind in ("inject",):
            lines.append(f"{'-':<8}{entry.label:<26}{entry.mode_desc:<16}{entry.out_channels}")
            i += 1
            continue
        if entry.kind == "cfp":
            j = i
            while (j + 1 < len(entries) and entries[j + 1].kind == "cfp"
                   and entries[j + 1].mode_desc == entry.mode_desc):
                j += 1
            count = j - i + 1
            label = entry.label if count == 1 else f"{count} × {entry.label}"
            num = str(number) if count == 1 else f"{number}-{number + count - 1}"
            lines.append(f"{num:<8}{label:<26}{entry.mode_desc:<16}{entry.out_channels}")
            number += count
            i = j + 1
            continue
        lines.append(f"{number:<8}{entry.label:<26}{entry.mode_desc:<16}{entry.out_channels}")
        number += 1
        i += 1
    return "\n".join(lines)
