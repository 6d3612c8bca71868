"""Mini-batch training and evaluation loops."""
from __future__ import annotations

import ctypes
import ctypes.util
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    OptimizerState,
    backward,
    lr_schedule,
    no_grad,
    scaled_learning_rate,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)
from .layers import Module


_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def keep_heap_memory(limit: int = 1 << 30) -> bool:
    """Ask glibc to keep freed buffers below ``limit`` bytes in the heap.

    Each batch allocates and frees the same activation sizes; without this
    every large buffer is a fresh mmap and pays page faults on first touch.
    Returns False where the allocator cannot be tuned.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, limit)) and bool(libc.mallopt(_M_TRIM_THRESHOLD, 2 * limit - 1))
    except (OSError, AttributeError):
        return False


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (30, 40)
    seed: int = 0
    scale_lr_with_batch: bool = False
    stop_at_accuracy: float | None = None

    def optimizer(self) -> OptimizerState:
        lr = self.learning_rate
        if self.scale_lr_with_batch:
            lr = scaled_learning_rate(lr, self.batch_size)
        return OptimizerState(learning_rate=lr, momentum=self.momentum,
                              weight_decay=self.weight_decay, milestones=self.milestones)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: float
    seconds: float


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_scores(net: Module, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax scores ``(B, classes)`` in evaluation mode."""
    was_training = net.training
    net.eval()
    out = []
    try:
        with no_grad():
            for idx in batches(len(x), batch_size):
                out.append(softmax(net(x[idx])).data.astype(np.float64))
    finally:
        net.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def evaluate(net: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    return accuracy(predict_scores(net, x, batch_size), y)


def train(net: Module, x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
          config: TrainConfig, on_epoch: Callable[[EpochMetrics], None] | None = None,
          optimizer: OptimizerState | None = None) -> list[EpochMetrics]:
    """SGD with momentum and step decay; returns one record per epoch.

    Deterministic given ``config.seed`` and the initial weights.
    """
    keep_heap_memory()
    opt = optimizer or config.optimizer()
    params = net.parameters()
    rng = np.random.default_rng(config.seed)
    dtype = getattr(net, "dtype", np.float64)
    x_train = np.asarray(x_train, dtype=dtype)
    x_test = np.asarray(x_test, dtype=dtype)
    history = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_schedule(opt, epoch)
        net.train()
        total, seen = 0.0, 0
        for idx in batches(len(x_train), config.batch_size, rng):
            for p in params:
                p.grad = None
            loss = softmax_cross_entropy(net(x_train[idx]), y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} in epoch {epoch}")
            backward(loss)
            sgd_step(opt, params)
            total += value * len(idx)
            seen += len(idx)
        acc = evaluate(net, x_test, y_test) if len(x_test) else float("nan")
        record = EpochMetrics(epoch, lr, total / max(seen, 1), acc, time.perf_counter() - start)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if config.stop_at_accuracy is not None and acc >= config.stop_at_accuracy:
            break
    return history
