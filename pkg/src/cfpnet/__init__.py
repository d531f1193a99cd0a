"""Channel-wise feature pyramid segmentation engine.

A from-scratch NumPy implementation of the CFP module and the full
network family built on it, with taped reverse-mode differentiation,
structural analysis tools, a desk-scale training protocol, and a CLI.
"""

from .blocks import (
    CFPModule,
    CFPModuleConfig,
    Downsampler,
    DownsamplerConfig,
    FPChannel,
    FPChannelConfig,
    dilation_schedule,
    hff_fuse,
    inject_input,
)
from .network import (
    Network,
    ParamReport,
    VariantSpec,
    build_network,
    count_parameters,
    effective_receptive_field,
    empirical_receptive_field,
    factorization_savings,
    layer_table,
)
from .tensor import ConvSpec, GradTape, ShapeError, Tensor

__all__ = [
    "CFPModule",
    "CFPModuleConfig",
    "ConvSpec",
    "Downsampler",
    "DownsamplerConfig",
    "FPChannel",
    "FPChannelConfig",
    "GradTape",
    "Network",
    "ParamReport",
    "ShapeError",
    "Tensor",
    "VariantSpec",
    "build_network",
    "count_parameters",
    "dilation_schedule",
    "effective_receptive_field",
    "empirical_receptive_field",
    "factorization_savings",
    "hff_fuse",
    "inject_input",
    "layer_table",
]

__version__ = "0.1.0"
