"""Network hyperparameters and their key-value text form."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..graph_core import NormalizationMode
from ..spacetime import Connectivity

AGGREGATIONS = ("disentangled", "powered")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _pathways(text: str) -> tuple[tuple[int, int], ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        tau, _, dil = item.strip().partition(":")
        out.append((int(tau), int(dil) if dil else 1))
    return tuple(out)


@dataclass(frozen=True)
class NetworkConfig:
    """Defaults describe the full three-block, dual-pathway model.

    ``pathways`` lists ``(tau, dilation)`` for each unified spatial-temporal
    pathway. ``expand_at_collapse`` keeps the graph convolution inside those
    pathways at the input width and lets the collapse readout widen the
    channels; otherwise the graph convolution already produces the output
    width.
    """

    num_classes: int = 60
    in_channels: int = 3
    topology: str = "ntu25"
    channels: tuple[int, ...] = (96, 192, 384)
    k_spatial: int = 12
    k_g3d: int = 5
    pathways: tuple[tuple[int, int], ...] = ((3, 1), (5, 1))
    variant: str = "cross_spacetime"
    masks: bool = True
    factorized: bool = True
    aggregation: str = "disentangled"
    normalization: str = "sym_self_loop"
    expand_at_collapse: bool = True
    tcn_dilations: tuple[int, ...] = (1, 2, 3, 4)
    temporal_stride: int = 2

    @property
    def blocks(self) -> int:
        return len(self.channels)

    def strides(self) -> tuple[int, ...]:
        return tuple(1 if i == 0 else self.temporal_stride for i in range(self.blocks))

    def validate(self) -> "NetworkConfig":
        problems = []
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.in_channels < 1:
            problems.append("in_channels must be >= 1")
        if not self.channels or any(c < 1 for c in self.channels):
            problems.append("channels must be a non-empty list of positive widths")
        if self.k_spatial < 0 or self.k_g3d < 0:
            problems.append("scale counts must be non-negative")
        for tau, dil in self.pathways:
            if tau < 1 or tau % 2 == 0:
                problems.append(f"window size {tau} must be odd and positive")
            if dil < 1:
                problems.append(f"window dilation {dil} must be positive")
        if not self.pathways and not self.factorized:
            problems.append("a block needs at least one pathway")
        if self.factorized and self.tcn_dilations:
            n = len(self.tcn_dilations)
            bad = [c for c in self.channels if c % n]
            if bad:
                problems.append(f"channels {bad} not divisible by {n} temporal branches")
        if self.factorized and not self.tcn_dilations:
            problems.append("tcn_dilations must be non-empty")
        if self.aggregation not in AGGREGATIONS:
            problems.append(f"aggregation must be one of {AGGREGATIONS}")
        try:
            NormalizationMode(self.normalization)
        except ValueError:
            problems.append(f"unknown normalization {self.normalization!r}")
        try:
            Connectivity(self.variant)
        except ValueError:
            problems.append(f"unknown variant {self.variant!r}")
        if self.temporal_stride < 1:
            problems.append("temporal_stride must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        """Narrow single-pathway model used for desk-scale runs."""
        base = cls(num_classes=4, channels=(24, 48, 96), pathways=((3, 1),), expand_at_collapse=False)
        return replace(base, **overrides)

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"blocks = {self.blocks}",
            f"channels = {','.join(map(str, self.channels))}",
            f"in_channels = {self.in_channels}",
            f"num_classes = {self.num_classes}",
            f"topology = {self.topology}",
            f"k_spatial = {self.k_spatial}",
            f"k_g3d = {self.k_g3d}",
            "pathways = " + (",".join(f"{t}:{d}" for t, d in self.pathways) or "none"),
            f"variant = {self.variant}",
            f"masks = {'on' if self.masks else 'off'}",
            f"factorized = {'on' if self.factorized else 'off'}",
            f"aggregation = {self.aggregation}",
            f"normalization = {self.normalization}",
            f"expand_at_collapse = {'on' if self.expand_at_collapse else 'off'}",
            f"tcn_dilations = {','.join(map(str, self.tcn_dilations))}",
            f"temporal_stride = {self.temporal_stride}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        parsers = {
            "channels": _ints, "tcn_dilations": _ints, "pathways": _pathways,
            "masks": _bool, "factorized": _bool, "expand_at_collapse": _bool,
            "topology": str.strip, "variant": str.strip, "aggregation": str.strip,
            "normalization": str.strip,
        }
        known = {f.name for f in fields(cls)}
        values: dict = {}
        blocks = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            if key != "blocks" and key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values or (key == "blocks" and blocks is not None):
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                if key == "blocks":
                    blocks = int(value)
                else:
                    values[key] = parsers.get(key, int)(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        config = cls(**values)
        if blocks is not None and blocks != config.blocks:
            raise ConfigError(f"blocks = {blocks} but {config.blocks} channel widths given")
        return config.validate()

    @classmethod
    def from_file(cls, path) -> "NetworkConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
