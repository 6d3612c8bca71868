"""Multi-scale temporal convolution with dilated bottleneck branches."""
from __future__ import annotations

import numpy as np

from ..autodiff import Parameter, Tensor, as_tensor, concat, relu, temporal_conv
from .module import BatchNorm, Module, as_rng, uniform_init


class TemporalBranch(Module):
    """1x1 bottleneck, BN, ReLU, then a dilated ``k x 1`` convolution."""

    def __init__(self, in_channels: int, channels: int, dilation: int, stride: int,
                 kernel: int = 3, *, rng=None, dtype=np.float64):
        rng = as_rng(rng)
        self.dilation, self.stride = dilation, stride
        self.bottleneck = Parameter(uniform_init(rng, (1, in_channels, channels), in_channels, dtype))
        self.bn = BatchNorm(channels, dtype)
        self.conv = Parameter(uniform_init(rng, (kernel, channels, channels), kernel * channels, dtype))

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.conv.shape[0] - 1) + 1

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn(temporal_conv(x, self.bottleneck)))
        return temporal_conv(h, self.conv, self.stride, self.dilation)


class MultiScaleTemporalConv(Module):
    """Parallel dilated branches concatenated on channels, plus a residual.

    The residual is the identity when shapes agree and a strided 1x1
    projection otherwise. The sum goes through BN and ReLU.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 dilations=(1, 2, 3, 4), kernel: int = 3, *, rng=None, dtype=np.float64):
        dilations = tuple(int(d) for d in dilations)
        if not dilations:
            raise ValueError("need at least one branch")
        if out_channels % len(dilations):
            raise ValueError(f"{out_channels} output channels do not split over {len(dilations)} branches")
        rng = as_rng(rng)
        self.dtype = np.dtype(dtype)
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        width = out_channels // len(dilations)
        self.branches = [TemporalBranch(in_channels, width, d, stride, kernel, rng=rng, dtype=dtype)
                         for d in dilations]
        if in_channels == out_channels and stride == 1:
            self.residual = None
        else:
            self.residual = Parameter(uniform_init(rng, (1, in_channels, out_channels), in_channels, dtype))
        self.bn = BatchNorm(out_channels, dtype)

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(b.dilation for b in self.branches)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x, dtype=self.dtype)
        outs = [b(x) for b in self.branches]
        y = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        res = x if self.residual is None else temporal_conv(x, self.residual, self.stride)
        return relu(self.bn(y + res))
