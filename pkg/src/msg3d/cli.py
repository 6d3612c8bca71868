"""``msg3d`` command line: graph diagnostics, training, evaluation and two-stream fusion."""
from __future__ import annotations

import argparse
import io
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetSplit,
    Normalizer,
    SequenceFormatError,
    derive_bones,
    fuse_two_stream,
    load_sequences,
    make_synthetic_split,
    pad_replay,
    preprocess_split,
    translate,
)
from .graph_core import (
    KAdjacencySet,
    NormalizationMode,
    TopologyError,
    add_self_loops,
    build_adjacency,
    load_topology,
    powered_adjacency,
    weight_distance_profile,
    write_matrix_csv,
)
from .layers import ConfigError, MSG3DNet, NetworkConfig
from .spacetime import Connectivity, WindowSpec, build_variant
from .training import DivergenceError, TrainConfig, accuracy, predict_scores, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
RUN_PREFIX = "# run: "
INPUT_ERRORS = (OSError, ValueError, KeyError, CheckpointError, ConfigError, TopologyError, SequenceFormatError)


class InputError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _figure_path(args) -> Path | None:
    return Path(args.figure) if getattr(args, "figure", None) else None


# -- graph ----------------------------------------------------------------------

def cmd_graph(args) -> int:
    topo = load_topology(args.topology)
    a_tilde = add_self_loops(build_adjacency(topo))
    fig = _figure_path(args)
    if args.graph_command == "adj":
        m = a_tilde
        title = f"{topo.name or 'skeleton'}: A + I"
    elif args.graph_command == "kadj":
        if args.k < 0:
            raise InputError("--k must be >= 0")
        m = KAdjacencySet.from_self_looped(a_tilde, args.k).raw[args.k]
        title = f"{args.k}-adjacency"
    elif args.graph_command == "st-dump":
        spec = WindowSpec(args.tau, args.dilation)
        m = build_variant(a_tilde, spec.tau, args.variant).raw
        title = f"window graph tau={spec.tau} ({args.variant})"
    else:
        return _graph_profile(args, topo, a_tilde, fig)
    _emit(write_matrix_csv(m), args.out)
    if fig is not None:
        from .plotting import plot_matrix
        plot_matrix(m, fig, title)
    return EXIT_OK


def _graph_profile(args, topo, a_tilde, fig) -> int:
    center = topo.center_joint if args.center is None else args.center
    if not 0 <= center < topo.num_joints:
        raise InputError(f"--center {center} out of range for {topo.num_joints} joints")
    if args.k < 0:
        raise InputError("--k must be >= 0")
    if args.power:
        m = powered_adjacency(build_adjacency(topo), args.k, NormalizationMode(args.mode))
        label = f"powered k={args.k}"
    else:
        m = KAdjacencySet.from_self_looped(a_tilde, args.k).normalized[args.k]
        label = f"disentangled k={args.k}"
    prof = weight_distance_profile(m, topo, center)
    buf = io.StringIO()
    buf.write("hop,mean_weight\n")
    for hop, value in prof:
        buf.write(f"{hop},{value:.17g}\n")
    _emit(buf.getvalue(), args.out)
    if fig is not None:
        from .plotting import plot_profile
        plot_profile({label: prof}, fig, f"center joint {center}")
    return EXIT_OK


# -- data and model plumbing ---------------------------------------------------------------

@dataclass
class RunSettings:
    seed: int = 0
    data_seed: int = 0
    n_train: int = 800
    n_test: int = 400
    frames: int = 64
    stream: str = "joint"
    data: str = ""
    test_data: str = ""
    workers: int = 1

    def to_lines(self) -> str:
        return "".join(f"{RUN_PREFIX}{k} = {v}\n" for k, v in vars(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RunSettings":
        values = {}
        types = {k: type(v) for k, v in vars(cls()).items()}
        for line in text.splitlines():
            if line.startswith(RUN_PREFIX):
                key, _, value = line[len(RUN_PREFIX):].partition("=")
                key = key.strip()
                if key in types:
                    values[key] = types[key](value.strip())
        return cls(**values)


def _load_split(settings: RunSettings, topology, need_train: bool = True) -> DatasetSplit:
    if settings.data or settings.test_data:
        if not settings.test_data:
            raise InputError("--test-data is required with --data")
        test = load_sequences(settings.test_data)
        train_ = load_sequences(settings.data) if settings.data else []
        if need_train and not train_:
            raise InputError("training data file holds no sequences")
        for s in train_ + test:
            if s.num_joints != topology.num_joints:
                raise InputError(f"sequence has {s.num_joints} joints, topology has {topology.num_joints}")
            s.topology = topology
        return DatasetSplit(train_, test)
    return make_synthetic_split(settings.n_train, settings.n_test, settings.data_seed, topology, settings.frames)


def _prepare(split: DatasetSplit, settings: RunSettings, normalizer: Normalizer | None):
    """Pad, optionally convert to bones, translate and normalize."""
    split = split.map(lambda s: pad_replay(s, settings.frames))
    if settings.stream == "bone":
        split = split.map(derive_bones)
    if normalizer is None:
        split, normalizer = preprocess_split(split)
    else:
        split = split.map(lambda s: normalizer.apply(translate(s)))
    return split, normalizer


def _stack(seqs):
    return DatasetSplit.stack(seqs) if seqs else (np.zeros((0,)), np.zeros((0,), dtype=np.int64))


def _network_config(args) -> NetworkConfig:
    config = NetworkConfig.from_file(args.config) if args.config else NetworkConfig.toy()
    overrides = {}
    if args.topology:
        overrides["topology"] = args.topology
    if args.num_classes is not None:
        overrides["num_classes"] = args.num_classes
    return replace(config, **overrides).validate()


def _write_metrics(path: Path, history) -> None:
    lines = ["epoch,lr,train_loss,test_accuracy"]
    lines += [f"{r.epoch},{r.lr:.10g},{r.train_loss:.10g},{r.test_accuracy:.6f}" for r in history]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    config = _network_config(args)
    topology = load_topology(config.topology)
    settings = RunSettings(seed=args.seed, data_seed=args.data_seed if args.data_seed is not None else args.seed,
                           n_train=args.n_train, n_test=args.n_test, frames=args.frames, stream=args.stream,
                           data=args.data or "", test_data=args.test_data or "", workers=args.workers)
    milestones = tuple(int(v) for v in args.milestones.split(",") if v.strip())
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                            momentum=args.momentum, weight_decay=args.weight_decay, milestones=milestones,
                            seed=args.seed, scale_lr_with_batch=args.scale_lr)
    if args.epochs < 0 or args.batch_size < 1:
        raise InputError("--epochs must be >= 0 and --batch-size >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    split, normalizer = _prepare(_load_split(settings, topology), settings, None)
    x_tr, y_tr = _stack(split.train)
    x_te, y_te = _stack(split.test)
    if y_tr.size and (y_tr.min() < 0 or y_tr.max() >= config.num_classes):
        raise InputError(f"labels fall outside 0..{config.num_classes - 1}")
    dtype = np.float64 if args.dtype == "float64" else np.float32
    net = MSG3DNet(config, topology, rng=args.seed, dtype=dtype)

    snapshot = config.to_text() + settings.to_lines()
    snapshot += f"{RUN_PREFIX}train = {train_cfg}\n"
    if settings.workers > 1:
        snapshot += f"{RUN_PREFIX}note = evaluation split over {settings.workers} threads; training is serial\n"
    (out / "config.snapshot").write_text(snapshot)

    def report(m):
        print(f"epoch {m.epoch}: lr={m.lr:.6g} loss={m.train_loss:.6f} test_acc={m.test_accuracy:.4f}", flush=True)
        print(f"  ({m.seconds:.1f}s)", file=sys.stderr, flush=True)

    history = train(net, x_tr, y_tr, x_te, y_te, train_cfg, on_epoch=report) if args.epochs else []
    state = net.state_dict()
    state["data.scale"] = normalizer.scale
    save_checkpoint(out / "model.ckpt", state)
    _write_metrics(out / "metrics.csv", history)
    if history and not args.no_figure:
        from .plotting import plot_training_curves
        plot_training_curves(history, out / "curves.png")
    return EXIT_OK


def _load_run(path: str, args) -> tuple[MSG3DNet, RunSettings, Normalizer]:
    ckpt = Path(path)
    if ckpt.is_dir():
        ckpt = ckpt / "model.ckpt"
    snap_path = Path(args.config) if getattr(args, "config", None) else ckpt.parent / "config.snapshot"
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    if not snap_path.is_file():
        raise InputError(f"config snapshot not found: {snap_path}")
    text = snap_path.read_text()
    config = NetworkConfig.from_text(text)
    settings = RunSettings.from_text(text)
    state = load_checkpoint(ckpt)
    scale = state.pop("data.scale", None)
    net = MSG3DNet(config, rng=0, dtype=np.float32)
    net.load_state_dict(state)
    normalizer = Normalizer(scale) if scale is not None else Normalizer(np.ones(net.config.in_channels))
    return net, settings, normalizer


def _apply_data_overrides(settings: RunSettings, args) -> RunSettings:
    changes = {}
    for key in ("data_seed", "n_train", "n_test", "frames", "stream", "test_data", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if "test_data" in changes:
        changes["data"] = ""
    return replace(settings, **changes)


def _scores(net, settings: RunSettings, normalizer: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    split = DatasetSplit([], _load_split(settings, net.topology, need_train=False).test)
    split, _ = _prepare(split, settings, normalizer)
    x, y = _stack(split.test)
    if y.size and (y.min() < 0 or y.max() >= net.config.num_classes):
        raise InputError(f"labels fall outside 0..{net.config.num_classes - 1}")
    workers = max(1, settings.workers)
    if workers == 1 or len(x) < 2:
        return predict_scores(net, x), y
    chunks = np.array_split(np.arange(len(x)), workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda idx: predict_scores(net, x[idx]), chunks))
    return np.concatenate(parts), y


def cmd_eval(args) -> int:
    net, settings, normalizer = _load_run(args.checkpoint, args)
    settings = _apply_data_overrides(settings, args)
    scores, labels = _scores(net, settings, normalizer)
    print(f"accuracy,{accuracy(scores, labels):.6f}")
    print(f"samples,{len(labels)}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    args.config = None
    joint, s_joint, n_joint = _load_run(args.joint, args)
    bone, s_bone, n_bone = _load_run(args.bone, args)
    if joint.config.num_classes != bone.config.num_classes:
        raise InputError(f"class counts differ: {joint.config.num_classes} vs {bone.config.num_classes}")
    s_joint = _apply_data_overrides(s_joint, args)
    s_bone = _apply_data_overrides(replace(s_bone, data_seed=s_joint.data_seed, n_train=s_joint.n_train,
                                           n_test=s_joint.n_test, frames=s_joint.frames,
                                           data=s_joint.data, test_data=s_joint.test_data), args)
    a, y = _scores(joint, s_joint, n_joint)
    b, y_b = _scores(bone, s_bone, n_bone)
    if not np.array_equal(y, y_b):
        raise InputError("the two streams were evaluated on different samples")
    fused = fuse_two_stream(a, b)
    print(f"joint,{accuracy(a, y):.6f}")
    print(f"bone,{accuracy(b, y):.6f}")
    print(f"fused,{float(np.mean(fused == y)) if len(y) else float('nan'):.6f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msg3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="dump skeleton graph matrices and weight profiles as CSV")
    gsub = g.add_subparsers(dest="graph_command", required=True)

    def graph_common(p):
        p.add_argument("--topology", default="ntu25", help="preset name or topology file (default: ntu25)")
        p.add_argument("--out", help="write CSV here instead of stdout")
        p.add_argument("--figure", help="also render a PNG figure to this path")

    graph_common(gsub.add_parser("adj", help="self-looped adjacency A + I"))
    p = gsub.add_parser("kadj", help="exact k-hop adjacency")
    graph_common(p)
    p.add_argument("--k", type=int, required=True, help="hop count (0 gives the identity)")
    p = gsub.add_parser("st-dump", help="spatial-temporal window graph")
    graph_common(p)
    p.add_argument("--tau", type=int, required=True, help="window size (odd)")
    p.add_argument("--dilation", type=int, default=1, help="window dilation; validated, does not change the graph")
    p.add_argument("--variant", default="cross_spacetime", choices=[c.value for c in Connectivity])
    p = gsub.add_parser("profile", help="mean weight per hop distance from a center joint")
    graph_common(p)
    kind = p.add_mutually_exclusive_group(required=True)
    kind.add_argument("--power", action="store_true", help="row of the k-th power of the normalized adjacency")
    kind.add_argument("--disentangled", action="store_true", help="row of the normalized k-hop adjacency")
    p.add_argument("--k", type=int, required=True, help="scale")
    p.add_argument("--center", type=int, help="center joint (default: the topology's center)")
    p.add_argument("--mode", default="sym_self_loop", choices=[m.value for m in NormalizationMode],
                   help="normalization for --power")
    g.set_defaults(func=cmd_graph)

    t = sub.add_parser("train", help="train a network; writes config.snapshot, metrics.csv, model.ckpt")
    t.add_argument("--config", help="network config file (default: the toy network)")
    t.add_argument("--topology", help="override the config's topology")
    t.add_argument("--num-classes", type=int, help="override the config's class count")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, default=0, help="weight init and shuffling seed")
    t.add_argument("--data-seed", type=int, help="synthetic data seed (default: --seed)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.05, help="base learning rate")
    t.add_argument("--milestones", default="30,40", help="comma-separated epochs where lr drops 10x")
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--scale-lr", action="store_true", help="scale lr linearly with batch size / 32")
    t.add_argument("--data", help="training sequence file (default: synthetic data)")
    t.add_argument("--test-data", help="test sequence file")
    t.add_argument("--n-train", type=int, default=800, help="synthetic training samples")
    t.add_argument("--n-test", type=int, default=400, help="synthetic test samples")
    t.add_argument("--frames", type=int, default=64, help="clip length after replay padding")
    t.add_argument("--stream", choices=("joint", "bone"), default="joint")
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.add_argument("--workers", type=int, default=1, help="threads for evaluation passes")
    t.add_argument("--no-figure", action="store_true", help="skip curves.png")
    t.set_defaults(func=cmd_train)

    def data_overrides(p):
        p.add_argument("--data-seed", type=int, help="synthetic data seed (default: from the run)")
        p.add_argument("--n-train", type=int, help="synthetic training count used to derive the test set")
        p.add_argument("--n-test", type=int, help="synthetic test samples")
        p.add_argument("--frames", type=int, help="clip length")
        p.add_argument("--test-data", help="evaluate on this sequence file instead")
        p.add_argument("--workers", type=int, help="evaluation threads")

    e = sub.add_parser("eval", help="accuracy of a trained checkpoint")
    e.add_argument("--checkpoint", required=True, help="model.ckpt or its run directory")
    e.add_argument("--config", help="config snapshot (default: next to the checkpoint)")
    e.add_argument("--stream", choices=("joint", "bone"), help="input stream (default: from the run)")
    data_overrides(e)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="sum the softmax scores of a joint and a bone model")
    f.add_argument("--joint", required=True, help="joint-stream checkpoint or run directory")
    f.add_argument("--bone", required=True, help="bone-stream checkpoint or run directory")
    data_overrides(f)
    f.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
