"""Spatial-temporal window graphs and windowed feature views.

A window covers ``tau`` frames; its graph has ``tau * N`` nodes ordered
frame-major (frame ``j`` owns nodes ``j*N .. (j+1)*N - 1``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, window_gather
from .graph_core import AdjacencyError, check_self_looped, k_adjacency, sym_normalize


class Connectivity(enum.Enum):
    CROSS_SPACETIME = "cross_spacetime"
    GRID_LIKE = "grid_like"
    GRID_LIKE_DENSE_SELF = "grid_like_dense_self"


@dataclass(frozen=True)
class WindowSpec:
    tau: int
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.tau < 1 or self.tau % 2 != 1:
            raise ValueError(f"window size must be a positive odd integer, got {self.tau}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class SpacetimeAdjacency:
    num_joints: int
    tau: int
    raw: np.ndarray
    variant: Connectivity
    k_raw: np.ndarray | None = None          # (K+1, tau*N, tau*N)
    k_normalized: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.tau * self.num_joints

    @property
    def max_scale(self) -> int | None:
        return None if self.k_raw is None else len(self.k_raw) - 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def tile_block_adjacency(a_tilde: np.ndarray, tau: int) -> SpacetimeAdjacency:
    """Every ``N x N`` block of the ``tau N x tau N`` matrix equals ``A~``."""
    return build_variant(a_tilde, tau, Connectivity.CROSS_SPACETIME)


def build_variant(a_tilde: np.ndarray, tau: int, variant) -> SpacetimeAdjacency:
    """Window graph under one of the connectivity schemes.

    ``GRID_LIKE`` keeps ``A~`` on the diagonal blocks and ``I`` on the first
    super/sub-diagonal blocks; ``GRID_LIKE_DENSE_SELF`` puts ``I`` in every
    off-diagonal block.
    """
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    check_self_looped(a_tilde)
    if tau < 1:
        raise ValueError("tau must be >= 1")
    try:
        variant = Connectivity(variant)
    except ValueError:
        raise ValueError(f"unknown connectivity variant {variant!r}") from None
    n = a_tilde.shape[0]
    if variant is Connectivity.CROSS_SPACETIME:
        raw = np.tile(a_tilde, (tau, tau))
    else:
        raw = np.zeros((tau * n, tau * n))
        eye = np.eye(n)
        for i in range(tau):
            for j in range(tau):
                if i == j:
                    block = a_tilde
                elif variant is Connectivity.GRID_LIKE_DENSE_SELF or abs(i - j) == 1:
                    block = eye
                else:
                    continue
                raw[i * n:(i + 1) * n, j * n:(j + 1) * n] = block
    return SpacetimeAdjacency(n, tau, _frozen(raw), variant)


def st_k_adjacency(st: SpacetimeAdjacency, max_scale: int) -> SpacetimeAdjacency:
    """Populate the exact-k-hop family of the window graph for ``k = 0..max_scale``."""
    if max_scale < 0:
        raise ValueError("max_scale must be non-negative")
    raw = np.stack([k_adjacency(st.raw, k) for k in range(max_scale + 1)])
    norm = np.stack([sym_normalize(r) for r in raw])
    return SpacetimeAdjacency(st.num_joints, st.tau, st.raw, st.variant, _frozen(raw), _frozen(norm))


def extract_windows(x, spec: WindowSpec):
    """Windowed view ``(..., T, N, C) -> (..., ceil(T / stride), tau * N, C)``.

    Accepts numpy arrays or tensors and returns the same kind. Windows are
    centered; frames outside the sequence are zeros.
    """
    if isinstance(x, Tensor):
        return window_gather(x, spec.tau, spec.dilation, spec.stride)
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return window_gather(Tensor(arr), spec.tau, spec.dilation, spec.stride).data


def window_frames(t: int, spec: WindowSpec) -> list[int]:
    """Frame indices gathered by window ``t`` (may fall outside the sequence)."""
    center = t * spec.stride
    half = (spec.tau - 1) // 2
    return [center + spec.dilation * (j - half) for j in range(spec.tau)]


__all__ = [
    "AdjacencyError", "Connectivity", "SpacetimeAdjacency", "WindowSpec", "build_variant",
    "extract_windows", "st_k_adjacency", "tile_block_adjacency", "window_frames",
]
