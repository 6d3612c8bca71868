"""Graph convolutions over a fixed node set and the window-collapse readout."""
from __future__ import annotations

import numpy as np

from ..autodiff import Parameter, Tensor, as_tensor, multiscale_graph_conv, relu, transpose
from ..graph_core import (
    KAdjacencySet,
    NormalizationMode,
    degree_scaling,
    powered_adjacency,
    sym_normalize,
)
from .module import Module, as_rng, uniform_init

MASK_INIT_RANGE = 1e-6


class MultiScaleGraphConv(Module):
    """``sigma(sum_s A_s X W_s)`` for a stack of fixed ``V x V`` operators ``A_s``.

    With masks enabled the operator for scale ``s`` becomes
    ``base_s + scale_s * M_s`` where ``scale_s`` is the outer product of the
    inverse square-root degrees of the unmasked graph, so the learned
    residual is normalized with the same degrees as the fixed part.

    Scale terms are accumulated one at a time in ascending order; this keeps
    a one-scale layer numerically identical to a plain graph convolution.
    """

    def __init__(self, bases: np.ndarray, in_channels: int, out_channels: int, *,
                 mask_scales: np.ndarray | None = None, activation: bool = False,
                 rng=None, dtype=np.float64):
        bases = np.asarray(bases, dtype=np.float64)
        if bases.ndim != 3 or bases.shape[1] != bases.shape[2]:
            raise ValueError(f"bases must have shape (S, V, V), got {bases.shape}")
        rng = as_rng(rng)
        self.dtype = np.dtype(dtype)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.activation = activation
        self.bases = bases.astype(dtype)
        self.num_nodes = bases.shape[1]
        fan_in = len(bases) * in_channels
        self.weights = [Parameter(uniform_init(rng, (in_channels, out_channels), fan_in, dtype))
                        for _ in range(len(bases))]
        if mask_scales is not None:
            mask_scales = np.asarray(mask_scales, dtype=np.float64)
            if mask_scales.shape != bases.shape:
                raise ValueError("mask_scales must match bases in shape")
            self.mask_scales = mask_scales.astype(dtype)
            v = self.num_nodes
            self.masks = [Parameter(rng.uniform(-MASK_INIT_RANGE, MASK_INIT_RANGE, (v, v)).astype(dtype))
                          for _ in range(len(bases))]
        else:
            self.mask_scales = None
            self.masks = []

    @property
    def num_scales(self) -> int:
        return len(self.bases)

    @property
    def uses_masks(self) -> bool:
        return bool(self.masks)

    def operator(self, s: int) -> Tensor:
        base = Tensor(self.bases[s])
        if not self.masks:
            return base
        return base + Tensor(self.mask_scales[s]) * self.masks[s]

    def effective_operators(self) -> np.ndarray:
        """Current ``(S, V, V)`` operators as plain arrays."""
        return np.stack([self.operator(s).data for s in range(self.num_scales)])

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x, dtype=self.dtype)
        v, c = self.num_nodes, self.in_channels
        if x.ndim < 2 or x.shape[-2:] != (v, c):
            raise ValueError(f"expected input (..., {v}, {c}), got {x.shape}")
        ops = [self.operator(s) for s in range(self.num_scales)]
        out = multiscale_graph_conv(x, ops, self.weights)
        return relu(out) if self.activation else out


def gcn_layer(a_tilde: np.ndarray, in_channels: int, out_channels: int, **kw) -> MultiScaleGraphConv:
    """Single-scale graph convolution with the symmetric-normalized ``A~``."""
    return MultiScaleGraphConv(sym_normalize(a_tilde)[None], in_channels, out_channels, **kw)


def disentangled_layer(k_set: KAdjacencySet, in_channels: int, out_channels: int, *,
                       masks: bool = True, **kw) -> MultiScaleGraphConv:
    """One scale per exact-k-hop adjacency ``k = 0..K``."""
    scales = np.stack([degree_scaling(r) for r in k_set.raw]) if masks else None
    return MultiScaleGraphConv(k_set.normalized, in_channels, out_channels, mask_scales=scales, **kw)


def powered_bases(adjacency: np.ndarray, max_scale: int,
                  mode: NormalizationMode = NormalizationMode.SYM_SELF_LOOP) -> np.ndarray:
    return np.stack([powered_adjacency(adjacency, k, mode) for k in range(max_scale + 1)])


def powered_layer(adjacency: np.ndarray, max_scale: int, in_channels: int, out_channels: int, *,
                  mode: NormalizationMode = NormalizationMode.SYM_SELF_LOOP,
                  masks: bool = False, **kw) -> MultiScaleGraphConv:
    """Polynomial of one normalized adjacency: scale ``k`` uses ``A_hat ** k``.

    Masks here are added unscaled.
    """
    bases = powered_bases(adjacency, max_scale, mode)
    scales = np.ones_like(bases) if masks else None
    return MultiScaleGraphConv(bases, in_channels, out_channels, mask_scales=scales, **kw)


class WindowCollapse(Module):
    """Concatenate each joint's ``tau`` frame copies and map them to ``C_out``."""

    def __init__(self, tau: int, num_joints: int, in_channels: int, out_channels: int, *,
                 rng=None, dtype=np.float64):
        rng = as_rng(rng)
        self.dtype = np.dtype(dtype)
        self.tau, self.num_joints = tau, num_joints
        self.in_channels, self.out_channels = in_channels, out_channels
        fan_in = tau * in_channels
        # row j * C_in + c reads channel c of window frame j
        self.weight = Parameter(uniform_init(rng, (fan_in, out_channels), fan_in, dtype))

    def forward(self, y: Tensor) -> Tensor:
        y = as_tensor(y, dtype=self.dtype)
        tau, n, c = self.tau, self.num_joints, self.in_channels
        if y.ndim < 2 or y.shape[-2:] != (tau * n, c):
            raise ValueError(f"expected (..., {tau * n}, {c}) frame-major input, got {y.shape}")
        lead = y.shape[:-2]
        k = len(lead)
        y = y.reshape(*lead, tau, n, c)
        axes = tuple(range(k)) + (k + 1, k, k + 2)
        joint_major = transpose(y, axes).reshape(*lead, n, tau * c)
        return joint_major @ self.weight
