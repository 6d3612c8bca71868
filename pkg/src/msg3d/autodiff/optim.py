"""SGD with momentum, L2 weight decay and step learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor

REFERENCE_BATCH = 32


class Parameter(Tensor):
    """A trainable leaf tensor with a registry name."""

    __slots__ = ("name", "weight_decay_exempt")

    def __init__(self, data, name: str = "", weight_decay_exempt: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.weight_decay_exempt = weight_decay_exempt

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class OptimizerState:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    milestones: tuple[int, ...] = (30, 40)
    decay_factor: float = 0.1
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    base_lr: float | None = None

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.learning_rate
        self.milestones = tuple(sorted(int(m) for m in self.milestones))


def scaled_learning_rate(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule relative to a batch of 32."""
    return base_lr * batch_size / REFERENCE_BATCH


def lr_schedule(state: OptimizerState, epoch: int) -> float:
    """Set and return the learning rate for ``epoch`` (0-based).

    The rate is ``base_lr * decay_factor ** m`` where ``m`` counts the
    milestones already reached.
    """
    passed = sum(1 for m in state.milestones if epoch >= m)
    state.epoch = epoch
    state.learning_rate = state.base_lr * state.decay_factor ** passed
    return state.learning_rate


def sgd_step(state: OptimizerState, params: Iterable[Parameter]) -> None:
    """``v <- m v + g + wd p``; ``p <- p - lr v`` for every parameter."""
    lr, m, wd = state.learning_rate, state.momentum, state.weight_decay
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        g = p.grad
        if wd and not p.weight_decay_exempt:
            g = g + wd * p.data
        key = p.name or f"#{id(p)}"
        v = state.velocity.get(key)
        if v is None:
            v = g.astype(p.dtype, copy=True)
        else:
            if v.shape != p.shape:
                raise ValueError(f"velocity shape mismatch for {p.name!r}")
            v = m * v + g
        state.velocity[key] = v = v.astype(p.dtype, copy=False)
        p.data -= (lr * v).astype(p.dtype, copy=False)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
