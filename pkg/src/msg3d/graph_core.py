"""Skeleton graphs and the adjacency algebra behind multi-scale aggregation.

All matrices are dense ``float64`` numpy arrays; skeletons and window graphs
have at most a few hundred nodes.
"""
from __future__ import annotations

import enum
import io
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNREACHABLE = -1


class TopologyError(ValueError):
    """Malformed skeleton description."""


class AdjacencyError(ValueError):
    """Matrix violates the precondition of an adjacency operation."""


def _canonical_edges(num_joints: int, edges: Iterable[Sequence[int]]) -> tuple[tuple[int, int], ...]:
    seen: set[tuple[int, int]] = set()
    out = []
    for e in edges:
        if len(e) != 2:
            raise TopologyError(f"edge {e!r} is not a pair")
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise TopologyError(f"edge ({i}, {j}) out of range for {num_joints} joints")
        if i == j:
            raise TopologyError(f"self-edge ({i}, {j}) in edge list")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise TopologyError(f"duplicate edge {key}")
        seen.add(key)
        out.append(key)
    return tuple(out)


def _neighbor_lists(adjacency: np.ndarray) -> list[np.ndarray]:
    n = adjacency.shape[0]
    off = adjacency.astype(bool) & ~np.eye(n, dtype=bool)
    return [np.flatnonzero(row) for row in off]


def hop_distances(adjacency: np.ndarray) -> np.ndarray:
    """All-pairs shortest hop counts by one breadth-first search per node.

    Nonzero off-diagonal entries are edges; the diagonal is ignored.
    Unreachable pairs get ``UNREACHABLE`` (-1).
    """
    adjacency = np.asarray(adjacency)
    n = adjacency.shape[0]
    nbrs = _neighbor_lists(adjacency)
    dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    for src in range(n):
        row = dist[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if row[v] == UNREACHABLE:
                    row[v] = row[u] + 1
                    queue.append(v)
    return dist


@dataclass(frozen=True)
class SkeletonTopology:
    """Joints, undirected bones, and the body-center joint of a skeleton."""

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int = 0
    name: str = ""
    _dist: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_joints < 1:
            raise TopologyError("a skeleton needs at least one joint")
        object.__setattr__(self, "edges", _canonical_edges(self.num_joints, self.edges))
        if not 0 <= self.center_joint < self.num_joints:
            raise TopologyError(f"center joint {self.center_joint} out of range")
        dist = hop_distances(build_adjacency(self))
        if (dist == UNREACHABLE).any():
            raise TopologyError(f"skeleton {self.name or '<unnamed>'} is not connected")
        dist.setflags(write=False)
        object.__setattr__(self, "_dist", dist)

    @property
    def distances(self) -> np.ndarray:
        """``(N, N)`` shortest hop counts."""
        return self._dist

    @property
    def is_tree(self) -> bool:
        return len(self.edges) == self.num_joints - 1

    def parents(self) -> np.ndarray:
        """Parent of each joint on its path toward the center (-1 at the center)."""
        if not self.is_tree:
            raise TopologyError("parent map requires a tree skeleton")
        d = self._dist[self.center_joint]
        parent = np.full(self.num_joints, -1, dtype=np.int64)
        for i, j in self.edges:
            child, par = (i, j) if d[i] > d[j] else (j, i)
            parent[child] = par
        return parent

    # -- text format ---------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"N {self.num_joints} C {self.center_joint}"]
        lines += [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, name: str = "") -> "SkeletonTopology":
        rows = [(no, ln.split("#", 1)[0].split()) for no, ln in enumerate(text.splitlines(), 1)]
        rows = [(no, parts) for no, parts in rows if parts]
        if not rows:
            raise TopologyError("empty topology file")
        no, head = rows[0]
        if len(head) != 4 or head[0] != "N" or head[2] != "C":
            raise TopologyError(f"line {no}: expected 'N <num_joints> C <center_index>'")
        try:
            n, c = int(head[1]), int(head[3])
            edges = []
            for no, parts in rows[1:]:
                if len(parts) != 2:
                    raise TopologyError(f"line {no}: expected 'i j'")
                i, j = int(parts[0]), int(parts[1])
                if i >= j:
                    raise TopologyError(f"line {no}: edge must be written with i < j")
                edges.append((i, j))
        except ValueError as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError(f"line {no}: {exc}") from None
        return cls(n, tuple(edges), c, name)

    @classmethod
    def from_file(cls, path) -> "SkeletonTopology":
        path = Path(path)
        return cls.from_text(path.read_text(), name=path.stem)

    @classmethod
    def preset(cls, name: str) -> "SkeletonTopology":
        """Bundled skeletons: ``ntu25`` and ``kinetics18``."""
        try:
            text = resources.files("msg3d.presets").joinpath(f"{name}.txt").read_text()
        except FileNotFoundError:
            raise TopologyError(f"unknown preset {name!r}") from None
        return cls.from_text(text, name=name)


def load_topology(spec: str) -> SkeletonTopology:
    """Resolve a preset name or a path to a topology file."""
    if Path(spec).is_file():
        return SkeletonTopology.from_file(spec)
    return SkeletonTopology.preset(spec)


def path_graph(n: int, center: int | None = None) -> SkeletonTopology:
    return SkeletonTopology(n, tuple((i, i + 1) for i in range(n - 1)),
                            n // 2 if center is None else center, f"path{n}")


def star_graph(leaves: int) -> SkeletonTopology:
    return SkeletonTopology(leaves + 1, tuple((0, i) for i in range(1, leaves + 1)), 0, f"star{leaves}")


# -- adjacency construction ------------------------------------------------------

def build_adjacency(topology: SkeletonTopology) -> np.ndarray:
    """Binary symmetric ``A`` with zero diagonal; ``A[i, j] = 1`` iff {i, j} is a bone."""
    n = topology.num_joints
    a = np.zeros((n, n))
    for i, j in _canonical_edges(n, topology.edges):
        a[i, j] = a[j, i] = 1.0
    return a


def add_self_loops(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    _check_square(a)
    if np.any(np.diag(a) != 0):
        raise AdjacencyError("matrix already has self-loops; refusing to add them twice")
    return a + np.eye(a.shape[0])


def _check_square(m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise AdjacencyError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise AdjacencyError("matrix has non-finite entries")


def check_self_looped(a_tilde: np.ndarray) -> None:
    _check_square(a_tilde)
    if not np.all((a_tilde == 0) | (a_tilde == 1)):
        raise AdjacencyError("expected a binary matrix")
    if not np.array_equal(a_tilde, a_tilde.T):
        raise AdjacencyError("expected a symmetric matrix")
    if not np.all(np.diag(a_tilde) == 1):
        raise AdjacencyError("expected self-loops on every node")


def k_adjacency(a_tilde: np.ndarray, k: int) -> np.ndarray:
    """Nodes exactly ``k`` hops apart, plus self-loops.

    Computed as ``I + 1(A~^k >= 1) - 1(A~^(k-1) >= 1)`` with boolean powers:
    with self-loops present, ``A~^k`` reaches every node within ``k`` hops.
    """
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    check_self_looped(a_tilde)
    if k < 0:
        raise ValueError("k must be non-negative")
    n = a_tilde.shape[0]
    eye = np.eye(n, dtype=np.int64)
    if k == 0:
        return eye.astype(np.float64)
    step = a_tilde.astype(np.int64)
    prev, cur = eye, step.copy()
    for _ in range(k - 1):
        prev, cur = cur, ((cur @ step) > 0).astype(np.int64)
    return (eye + cur - prev).astype(np.float64)


def k_adjacency_from_distances(dist: np.ndarray, k: int) -> np.ndarray:
    out = (dist == k).astype(np.float64)
    np.fill_diagonal(out, 1.0)
    return out


def k_adjacency_bfs(topology: SkeletonTopology, k: int) -> np.ndarray:
    """Same contract as :func:`k_adjacency`, from per-node breadth-first search."""
    return k_adjacency_from_distances(hop_distances(build_adjacency(topology)), k)


# -- normalization -----------------------------------------------------------------

class NormalizationMode(enum.Enum):
    SYM_SELF_LOOP = "sym_self_loop"   # D~^-1/2 (A + I) D~^-1/2
    RANDOM_WALK = "random_walk"       # D^-1 A
    SYM_LAPLACIAN = "sym_laplacian"   # I - D^-1/2 A D^-1/2


def sym_normalize(m: np.ndarray) -> np.ndarray:
    """``D^-1/2 M D^-1/2`` with ``D`` the row sums of ``M``."""
    m = np.asarray(m, dtype=np.float64)
    _check_square(m)
    if np.any(m < 0):
        raise AdjacencyError("expected a non-negative matrix")
    deg = m.sum(axis=1)
    if np.any(deg <= 0):
        raise AdjacencyError("zero row sum; k-adjacency without self-loops?")
    s = 1.0 / np.sqrt(deg)
    return s[:, None] * m * s[None, :]


def degree_scaling(m: np.ndarray) -> np.ndarray:
    """Outer product ``d_i^-1/2 d_j^-1/2`` used to normalize additive masks."""
    deg = np.asarray(m, dtype=np.float64).sum(axis=1)
    if np.any(deg <= 0):
        raise AdjacencyError("zero row sum")
    s = 1.0 / np.sqrt(deg)
    return np.outer(s, s)


def normalize(a: np.ndarray, mode: NormalizationMode) -> np.ndarray:
    """Normalized form of a raw adjacency ``a`` (no self-loops) under ``mode``."""
    a = np.asarray(a, dtype=np.float64)
    mode = NormalizationMode(mode)
    if mode is NormalizationMode.SYM_SELF_LOOP:
        return sym_normalize(add_self_loops(a))
    _check_square(a)
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise AdjacencyError("isolated node; degree normalization undefined")
    if mode is NormalizationMode.RANDOM_WALK:
        return a / deg[:, None]
    s = 1.0 / np.sqrt(deg)
    return np.eye(a.shape[0]) - s[:, None] * a * s[None, :]


def powered_adjacency(a: np.ndarray, k: int, mode: NormalizationMode) -> np.ndarray:
    """``A_hat^k`` for the normalized adjacency ``A_hat``; ``A_hat^0 = I``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return np.linalg.matrix_power(normalize(a, mode), k)


# -- k-adjacency family -----------------------------------------------------------------

@dataclass(frozen=True)
class KAdjacencySet:
    """``{A~_(k)}`` for ``k = 0..max_scale`` and their normalized forms."""

    topology: SkeletonTopology | None
    max_scale: int
    raw: np.ndarray          # (K+1, N, N)
    normalized: np.ndarray   # (K+1, N, N)

    @classmethod
    def from_self_looped(cls, a_tilde: np.ndarray, max_scale: int,
                         topology: SkeletonTopology | None = None) -> "KAdjacencySet":
        raw = np.stack([k_adjacency(a_tilde, k) for k in range(max_scale + 1)])
        norm = np.stack([sym_normalize(r) for r in raw])
        raw.setflags(write=False)
        norm.setflags(write=False)
        return cls(topology, max_scale, raw, norm)

    @classmethod
    def build(cls, topology: SkeletonTopology, max_scale: int) -> "KAdjacencySet":
        return cls.from_self_looped(add_self_loops(build_adjacency(topology)), max_scale, topology)

    def __len__(self) -> int:
        return self.max_scale + 1


# -- diagnostics ----------------------------------------------------------------------

def graph_diameter(topology: SkeletonTopology) -> int:
    dist = hop_distances(build_adjacency(topology))
    if (dist == UNREACHABLE).any():
        raise TopologyError("diameter undefined for a disconnected graph")
    return int(dist.max())


def weight_distance_profile(m: np.ndarray, topology: SkeletonTopology,
                            center: int) -> list[tuple[int, float]]:
    """Mean of ``m[center, j]`` over the joints ``j`` at each hop distance.

    Distances run from 0 to the graph diameter; a distance with no joints
    (beyond the center's eccentricity) reports 0.
    """
    m = np.asarray(m, dtype=np.float64)
    n = topology.num_joints
    if m.shape != (n, n):
        raise AdjacencyError(f"matrix shape {m.shape} does not match {n} joints")
    d = topology.distances[center]
    out = []
    for hop in range(int(topology.distances.max()) + 1):
        sel = d == hop
        out.append((hop, float(m[center, sel].mean()) if sel.any() else 0.0))
    return out


def write_matrix_csv(m: np.ndarray, stream: io.TextIOBase | None = None) -> str:
    """Row-major CSV with 17 significant digits (round-trips float64)."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    text = "\n".join(",".join(f"{v:.17g}" for v in row) for row in m) + "\n"
    if stream is not None:
        stream.write(text)
    return text


def read_matrix_csv(text: str) -> np.ndarray:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    return np.array([[float(v) for v in ln.split(",")] for ln in rows])
