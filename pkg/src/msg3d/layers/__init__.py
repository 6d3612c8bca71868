"""Graph, temporal and network layers built on the autodiff core."""
from .config import ConfigError, NetworkConfig
from .graph_conv import (
    MASK_INIT_RANGE,
    MultiScaleGraphConv,
    WindowCollapse,
    disentangled_layer,
    gcn_layer,
    powered_bases,
    powered_layer,
)
from .module import BatchNorm, Module, as_rng, uniform_init
from .network import FactorizedPathway, G3DPathway, MSG3DNet, STGCBlock, count_parameters
from .temporal import MultiScaleTemporalConv, TemporalBranch

__all__ = [
    "BatchNorm", "ConfigError", "FactorizedPathway", "G3DPathway", "MASK_INIT_RANGE", "MSG3DNet",
    "Module", "MultiScaleGraphConv", "MultiScaleTemporalConv", "NetworkConfig", "STGCBlock",
    "TemporalBranch", "WindowCollapse", "as_rng", "count_parameters", "disentangled_layer",
    "gcn_layer", "powered_bases", "powered_layer", "uniform_init",
]
