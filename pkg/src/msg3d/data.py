"""Skeleton sequences: preprocessing, bones, a synthetic action set, text I/O and fusion."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph_core import SkeletonTopology, TopologyError

NUM_SYNTH_CLASSES = 4
SYNTH_NOISE = 0.02


@dataclass
class SkeletonSequence:
    """``frames`` is ``(T, N, C)``: frames, joints, per-joint features."""

    frames: np.ndarray
    label: int = -1
    topology: SkeletonTopology | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (T, N, C), got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")
        if self.topology is not None and self.frames.shape[1] != self.topology.num_joints:
            raise ValueError(f"{self.frames.shape[1]} joints but topology has {self.topology.num_joints}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[2]

    def with_frames(self, frames: np.ndarray) -> "SkeletonSequence":
        return replace(self, frames=frames, meta=dict(self.meta))


@dataclass
class DatasetSplit:
    train: list[SkeletonSequence]
    test: list[SkeletonSequence]
    seed: int | None = None

    def __post_init__(self):
        if {id(s) for s in self.train} & {id(s) for s in self.test}:
            raise ValueError("train and test share sequences")

    @staticmethod
    def stack(seqs: list[SkeletonSequence]) -> tuple[np.ndarray, np.ndarray]:
        """``(B, T, N, C)`` features and ``(B,)`` labels; lengths must agree."""
        if not seqs:
            raise ValueError("no sequences")
        lengths = {s.frames.shape for s in seqs}
        if len(lengths) != 1:
            raise ValueError(f"sequences differ in shape: {sorted(lengths)}; pad them first")
        return np.stack([s.frames for s in seqs]), np.array([s.label for s in seqs], dtype=np.int64)

    def map(self, fn) -> "DatasetSplit":
        return DatasetSplit([fn(s) for s in self.train], [fn(s) for s in self.test], self.seed)


# -- preprocessing -----------------------------------------------------------------

def pad_replay(seq: SkeletonSequence, target_T: int = 300) -> SkeletonSequence:
    """Repeat the frames cyclically up to ``target_T``; longer inputs keep their first frames."""
    if target_T < 1:
        raise ValueError("target length must be >= 1")
    t = seq.num_frames
    if t == target_T:
        return seq
    idx = np.arange(target_T) % t
    return seq.with_frames(seq.frames[idx])


def _coord_channels(seq: SkeletonSequence) -> int:
    return int(seq.meta.get("coord_channels", seq.num_channels))


def translate(seq: SkeletonSequence, center: int | None = None) -> SkeletonSequence:
    """Subtract the center joint's first-frame position from every joint and frame.

    Only coordinate channels move; trailing channels such as detection
    confidence (``meta["coord_channels"]``) are left alone.
    """
    if center is None:
        center = seq.topology.center_joint if seq.topology is not None else 0
    k = _coord_channels(seq)
    out = seq.frames.copy()
    out[..., :k] -= seq.frames[0, center, :k]
    return seq.with_frames(out)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel divisor fitted on translated training data."""

    scale: np.ndarray

    def apply(self, seq: SkeletonSequence) -> SkeletonSequence:
        k = len(self.scale)
        out = seq.frames.copy()
        out[..., :k] /= self.scale
        return seq.with_frames(out)


def fit_normalizer(train: list[SkeletonSequence]) -> Normalizer:
    """Standard deviation of each coordinate channel over all training frames and joints."""
    if not train:
        raise ValueError("cannot fit a normalizer on an empty set")
    k = min(_coord_channels(s) for s in train)
    values = np.concatenate([translate(s).frames[..., :k].reshape(-1, k) for s in train])
    std = values.std(axis=0)
    std[std == 0] = 1.0
    return Normalizer(std)


def normalize_translate(seq: SkeletonSequence, normalizer: Normalizer | None = None) -> SkeletonSequence:
    """Translate to the center joint, then scale by a fitted normalizer.

    Without a normalizer the statistics come from the sequence itself.
    """
    moved = translate(seq)
    return (normalizer or fit_normalizer([seq])).apply(moved)


def preprocess_split(split: DatasetSplit, target_T: int | None = None) -> tuple[DatasetSplit, Normalizer]:
    """Pad, translate and normalize; statistics come from the training half only."""
    if target_T is not None:
        split = split.map(lambda s: pad_replay(s, target_T))
    norm = fit_normalizer(split.train)
    return split.map(lambda s: norm.apply(translate(s))), norm


def derive_bones(seq: SkeletonSequence, topology: SkeletonTopology | None = None) -> SkeletonSequence:
    """Replace joint ``n`` by ``x_n - x_parent(n)``; the center joint's bone is zero."""
    topology = topology or seq.topology
    if topology is None:
        raise TopologyError("bone features need a topology")
    if not topology.is_tree:
        raise TopologyError("bone features need a tree skeleton")
    parent = topology.parents()
    k = _coord_channels(seq)
    out = seq.frames.copy()
    root = parent < 0
    par = np.where(root, np.arange(len(parent)), parent)
    out[..., :k] = seq.frames[..., :k] - seq.frames[:, par, :k]
    return seq.with_frames(out)


# -- synthetic actions ---------------------------------------------------------------

_NTU_REST = np.array([
    [0.00, 0.00, 0.00], [0.00, 0.30, 0.00], [0.00, 0.62, 0.00], [0.00, 0.75, 0.00],
    [0.18, 0.52, 0.00], [0.22, 0.26, 0.00], [0.24, 0.02, 0.00], [0.25, -0.05, 0.00],
    [-0.18, 0.52, 0.00], [-0.22, 0.26, 0.00], [-0.24, 0.02, 0.00], [-0.25, -0.05, 0.00],
    [0.10, -0.02, 0.00], [0.11, -0.45, 0.00], [0.11, -0.88, 0.00], [0.11, -0.93, 0.10],
    [-0.10, -0.02, 0.00], [-0.11, -0.45, 0.00], [-0.11, -0.88, 0.00], [-0.11, -0.93, 0.10],
    [0.00, 0.55, 0.00], [0.26, -0.12, 0.00], [0.22, -0.06, 0.03], [-0.26, -0.12, 0.00],
    [-0.22, -0.06, 0.03],
])

_KINETICS_REST = np.array([
    [0.00, 0.70], [0.00, 0.55], [-0.18, 0.52], [-0.22, 0.26], [-0.24, 0.02], [0.18, 0.52],
    [0.22, 0.26], [0.24, 0.02], [-0.10, -0.02], [-0.11, -0.45], [-0.11, -0.88], [0.10, -0.02],
    [0.11, -0.45], [0.11, -0.88], [-0.03, 0.74], [0.03, 0.74], [-0.07, 0.72], [0.07, 0.72],
])


@dataclass(frozen=True)
class _Rig:
    rest: np.ndarray
    # per class: (root joint, sign); the root's subtree oscillates
    classes: tuple[tuple[tuple[int, int], ...], ...]
    confidence: bool = False


def _rig_for(topology: SkeletonTopology) -> _Rig:
    for name, rest, left_arm, right_arm, left_hip, right_hip, conf in (
            ("ntu25", _NTU_REST, 4, 8, 12, 16, False),
            ("kinetics18", _KINETICS_REST, 5, 2, 11, 8, True)):
        preset = SkeletonTopology.preset(name)
        if (topology.num_joints, topology.edges) == (preset.num_joints, preset.edges):
            classes = (((left_arm, 1),), ((right_arm, 1),), ((left_arm, 1), (right_arm, -1)),
                       ((left_hip, 1), (right_hip, -1)))
            return _Rig(rest, classes, conf)
    raise TopologyError("synthetic actions are defined for the ntu25 and kinetics18 skeletons only")


def _subtree_weights(topology: SkeletonTopology, root: int) -> np.ndarray:
    """Hop distance below ``root`` (away from the center) scaled to ``(0, 1]``; 0 elsewhere."""
    parent = topology.parents()
    depth = np.zeros(topology.num_joints)
    for j in range(topology.num_joints):
        hops, k = 0, j
        while k != root and k >= 0:
            k, hops = parent[k], hops + 1
        if k == root and j != root:
            depth[j] = hops
    return depth / depth.max() if depth.max() > 0 else depth


def synth_generate(class_id: int, seed, topology: SkeletonTopology | None = None,
                   T: int = 64) -> SkeletonSequence:
    """One synthetic action; identical ``seed`` gives identical output.

    Each class swings a different set of limbs. Every swing completes a whole
    number of cycles within the clip, so the time-averaged pose carries no
    class information.
    """
    if not 0 <= class_id < NUM_SYNTH_CLASSES:
        raise ValueError(f"class must be in 0..{NUM_SYNTH_CLASSES - 1}, got {class_id}")
    if T < 1:
        raise ValueError("T must be >= 1")
    topology = topology or SkeletonTopology.preset("ntu25")
    rig = _rig_for(topology)
    rng = np.random.default_rng(seed)
    dims = rig.rest.shape[1]

    pose = rig.rest * rng.uniform(0.9, 1.1)
    if dims == 3:
        yaw = rng.uniform(-np.pi / 12, np.pi / 12)
        c, s = np.cos(yaw), np.sin(yaw)
        pose = pose @ np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
    frames = np.broadcast_to(pose, (T, topology.num_joints, dims)).copy()

    t = np.arange(T) / T
    cycles = rng.integers(1, 4)
    phase = rng.uniform(0, 2 * np.pi)
    for root, sign in rig.classes[class_id]:
        direction = rng.standard_normal(dims)
        direction /= np.linalg.norm(direction)
        amp = rng.uniform(0.1, 0.2)
        wave = sign * amp * np.sin(2 * np.pi * cycles * t + phase)
        w = _subtree_weights(topology, root)
        frames += wave[:, None, None] * w[None, :, None] * direction

    frames += rng.uniform(-0.5, 0.5, dims)
    frames += rng.normal(0.0, SYNTH_NOISE, frames.shape)
    meta = {"seed": seed if isinstance(seed, int) else None}
    if rig.confidence:
        conf = rng.uniform(0.8, 1.0, (T, topology.num_joints, 1))
        frames = np.concatenate([frames, conf], axis=-1)
        meta["coord_channels"] = dims
    return SkeletonSequence(frames, class_id, topology, meta)


def make_synthetic_split(n_train: int = 800, n_test: int = 400, seed: int = 0,
                         topology: SkeletonTopology | None = None, T: int = 64) -> DatasetSplit:
    """Class-balanced train/test sets with independent per-sample seeds."""
    topology = topology or SkeletonTopology.preset("ntu25")
    children = np.random.SeedSequence(seed).spawn(n_train + n_test + 1)
    order_rng = np.random.default_rng(children[-1])

    def make(count, offset):
        labels = order_rng.permutation(np.arange(count) % NUM_SYNTH_CLASSES)
        return [synth_generate(int(c), children[offset + i], topology, T) for i, c in enumerate(labels)]

    return DatasetSplit(make(n_train, 0), make(n_test, n_train), seed)


# -- text format -------------------------------------------------------------------

class SequenceFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


def save_sequences(path, seqs: list[SkeletonSequence]) -> None:
    buf = io.StringIO()
    for i, seq in enumerate(seqs):
        if i:
            buf.write("\n")
        t, n, c = seq.frames.shape
        buf.write(f"SEQ label={seq.label} T={t} N={n} C={c}\n")
        for row in seq.frames.reshape(t * n, c):
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_header(line: str, offset: int) -> tuple[int, int, int, int]:
    parts = line.split()
    if not parts or parts[0] != "SEQ":
        raise SequenceFormatError(f"expected 'SEQ' header, got {line[:40]!r}", offset)
    fields_ = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep or key not in ("label", "T", "N", "C") or key in fields_:
            raise SequenceFormatError(f"bad header field {part!r}", offset)
        try:
            fields_[key] = int(value)
        except ValueError:
            raise SequenceFormatError(f"non-integer header value {part!r}", offset) from None
    if set(fields_) != {"label", "T", "N", "C"}:
        raise SequenceFormatError("header needs label, T, N and C", offset)
    if min(fields_["T"], fields_["N"], fields_["C"]) < 1:
        raise SequenceFormatError("T, N and C must be positive", offset)
    return fields_["label"], fields_["T"], fields_["N"], fields_["C"]


def parse_sequences(data: bytes) -> list[SkeletonSequence]:
    lines = []
    offset = 0
    for raw in data.splitlines(keepends=True):
        lines.append((offset, raw.decode("utf-8", errors="replace").rstrip("\r\n")))
        offset += len(raw)
    seqs = []
    i = 0
    while i < len(lines):
        off, line = lines[i]
        if not line.strip():
            i += 1
            continue
        label, t, n, c = _parse_header(line, off)
        i += 1
        rows = np.empty((t * n, c))
        for r in range(t * n):
            if i >= len(lines):
                raise SequenceFormatError(f"file ends after {r} of {t * n} rows", len(data))
            off, line = lines[i]
            vals = line.split()
            if len(vals) != c:
                raise SequenceFormatError(f"expected {c} values, found {len(vals)}", off)
            try:
                rows[r] = [float(v) for v in vals]
            except ValueError:
                raise SequenceFormatError(f"unparsable number in {line[:40]!r}", off) from None
            i += 1
        try:
            seqs.append(SkeletonSequence(rows.reshape(t, n, c), label))
        except ValueError as exc:
            raise SequenceFormatError(str(exc), off) from None
    return seqs


def load_sequences(path) -> list[SkeletonSequence]:
    return parse_sequences(Path(path).read_bytes())


# -- fusion ---------------------------------------------------------------------

def fuse_two_stream(scores_joint: np.ndarray, scores_bone: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Class predictions from the sum of two streams' softmax scores."""
    a = np.asarray(scores_joint, dtype=np.float64)
    b = np.asarray(scores_bone, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"score shapes differ or are not (B, classes): {a.shape} vs {b.shape}")
    for name, s in (("joint", a), ("bone", b)):
        if np.any(s < 0) or not np.allclose(s.sum(axis=1), 1.0, atol=atol):
            raise ValueError(f"{name} scores are not softmax rows")
    return np.argmax(a + b, axis=1)
