"""Pathways, spatial-temporal blocks and the full classifier."""
from __future__ import annotations

import numpy as np

from ..autodiff import Parameter, Tensor, as_tensor, relu, window_gather
from ..graph_core import (
    KAdjacencySet,
    NormalizationMode,
    SkeletonTopology,
    add_self_loops,
    build_adjacency,
    load_topology,
)
from ..spacetime import WindowSpec, build_variant, st_k_adjacency
from .config import ConfigError, NetworkConfig
from .graph_conv import MultiScaleGraphConv, WindowCollapse, disentangled_layer, powered_layer
from .module import BatchNorm, Module, as_rng, uniform_init
from .temporal import MultiScaleTemporalConv


def _graph_layer(a_tilde: np.ndarray, max_scale: int, cin: int, cout: int, config: NetworkConfig,
                 rng, dtype) -> MultiScaleGraphConv:
    if config.aggregation == "powered":
        a = a_tilde - np.eye(len(a_tilde))
        return powered_layer(a, max_scale, cin, cout, mode=NormalizationMode(config.normalization),
                             masks=config.masks, rng=rng, dtype=dtype)
    k_set = KAdjacencySet.from_self_looped(a_tilde, max_scale)
    return disentangled_layer(k_set, cin, cout, masks=config.masks, rng=rng, dtype=dtype)


class G3DPathway(Module):
    """Windowed multi-scale graph convolution, then the collapse readout.

    ``(B, T, N, C_in) -> (B, ceil(T / stride), N, C_out)``.
    """

    def __init__(self, a_tilde: np.ndarray, spec: WindowSpec, in_channels: int, mid_channels: int,
                 out_channels: int, config: NetworkConfig, *, rng=None, dtype=np.float64):
        rng = as_rng(rng)
        self.spec = spec
        self.num_joints = len(a_tilde)
        st = build_variant(a_tilde, spec.tau, config.variant)
        self.st_adj = st_k_adjacency(st, config.k_g3d) if config.aggregation == "disentangled" else st
        self.gconv = _graph_layer(st.raw, config.k_g3d, in_channels, mid_channels, config, rng, dtype)
        self.gconv_bn = BatchNorm(mid_channels, dtype)
        self.collapse = WindowCollapse(spec.tau, self.num_joints, mid_channels, out_channels,
                                       rng=rng, dtype=dtype)
        self.bn = BatchNorm(out_channels, dtype)

    def windows(self, x: Tensor) -> Tensor:
        return window_gather(x, self.spec.tau, self.spec.dilation, self.spec.stride)

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.gconv_bn(self.gconv(self.windows(x))))
        return relu(self.bn(self.collapse(h)))


class FactorizedPathway(Module):
    """Spatial multi-scale graph convolution followed by two temporal modules."""

    def __init__(self, a_tilde: np.ndarray, in_channels: int, out_channels: int, stride: int,
                 config: NetworkConfig, *, rng=None, dtype=np.float64):
        rng = as_rng(rng)
        self.gconv = _graph_layer(a_tilde, config.k_spatial, in_channels, out_channels, config, rng, dtype)
        self.bn = BatchNorm(out_channels, dtype)
        self.tcn1 = MultiScaleTemporalConv(out_channels, out_channels, 1, config.tcn_dilations,
                                           rng=rng, dtype=dtype)
        self.tcn2 = MultiScaleTemporalConv(out_channels, out_channels, stride, config.tcn_dilations,
                                           rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn(self.gconv(x)))
        return self.tcn2(self.tcn1(h))


class STGCBlock(Module):
    """Parallel pathways whose outputs are summed."""

    def __init__(self, pathways: list[Module], out_channels: int, stride: int):
        if not pathways:
            raise ConfigError("a block needs at least one pathway")
        self.pathways = list(pathways)
        self.out_channels, self.stride = out_channels, stride

    def forward(self, x: Tensor) -> Tensor:
        outs = [p(x) for p in self.pathways]
        shapes = {o.shape for o in outs}
        if len(shapes) != 1:
            raise ValueError(f"pathway outputs disagree in shape: {sorted(shapes)}")
        out = outs[0]
        for o in outs[1:]:
            out = out + o
        return out


class MSG3DNet(Module):
    """Stacked blocks, global average pooling over frames and joints, linear classifier."""

    def __init__(self, config: NetworkConfig, topology: SkeletonTopology | None = None, *,
                 rng=None, dtype=np.float64):
        config.validate()
        rng = as_rng(rng)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.topology = topology if topology is not None else load_topology(config.topology)
        a_tilde = add_self_loops(build_adjacency(self.topology))
        blocks = []
        cin = config.in_channels
        for cout, stride in zip(config.channels, config.strides()):
            paths: list[Module] = []
            for tau, dil in config.pathways:
                cmid = cin if config.expand_at_collapse else cout
                paths.append(G3DPathway(a_tilde, WindowSpec(tau, dil, stride), cin, cmid, cout, config,
                                        rng=rng, dtype=dtype))
            if config.factorized:
                paths.append(FactorizedPathway(a_tilde, cin, cout, stride, config, rng=rng, dtype=dtype))
            blocks.append(STGCBlock(paths, cout, stride))
            cin = cout
        self.blocks = blocks
        self.fc_weight = Parameter(uniform_init(rng, (cin, config.num_classes), cin, dtype))
        self.fc_bias = Parameter(np.zeros(config.num_classes, dtype=dtype))

    @property
    def feature_width(self) -> int:
        return self.config.channels[-1]

    def features(self, x) -> Tensor:
        """Pooled ``(B, C_last)`` features for a ``(B, T, N, C)`` batch."""
        x = as_tensor(x, dtype=self.dtype)
        n, c = self.topology.num_joints, self.config.in_channels
        if x.ndim != 4 or x.shape[2:] != (n, c):
            raise ValueError(f"expected input (B, T, {n}, {c}), got {x.shape}")
        h = x
        for block in self.blocks:
            h = block(h)
        return h.mean(axis=(1, 2))

    def forward(self, x) -> Tensor:
        """Logits ``(B, classes)``; a single ``(T, N, C)`` sequence gives ``(1, classes)``."""
        x = as_tensor(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        return self.features(x) @ self.fc_weight + self.fc_bias


def count_parameters(module: Module) -> int:
    """Total number of trainable scalars, masks and BN affine terms included."""
    return int(sum(p.size for p in module.parameters()))
