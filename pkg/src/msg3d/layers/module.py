"""Parameter registry, batch-norm layer and weight initialization."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..autodiff import BatchNormState, Parameter, Tensor, batch_norm


class Module:
    """Base class: attributes holding Parameters, Modules or lists of Modules
    are discovered in definition order."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(
                    isinstance(v, (Parameter, Module)) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        seen: dict[int, str] = {}
        self._collect(prefix, out, seen)
        return out

    def _collect(self, prefix, out, seen):
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) in seen:
                    raise ValueError(f"parameter registered twice: {seen[id(value)]} and {name}")
                seen[id(value)] = name
                value.name = name
                out.append((name, value))
            else:
                value._collect(f"{name}.", out, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for key, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{key}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        expected = set(params) | buffers
        if strict:
            missing, extra = expected - set(state), set(state) - expected
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
                p.data = value.astype(p.dtype).copy()
        for m_name, module in self._named_modules():
            if isinstance(module, BatchNorm):
                for buf in ("running_mean", "running_var"):
                    key = f"{m_name}{buf}"
                    if key in state:
                        setattr(module.state, buf, np.asarray(state[key]).astype(module.dtype).copy())

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{key}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.gamma = Parameter(np.ones(channels, dtype=dtype), weight_decay_exempt=True)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), weight_decay_exempt=True)
        self.state = BatchNormState(self.gamma, self.beta,
                                    np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def named_buffers(self, prefix: str = ""):
        return [(f"{prefix}running_mean", self.state.running_mean),
                (f"{prefix}running_var", self.state.running_var)]

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.state, self.training)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """He-style uniform: ``U(-b, b)`` with ``b = sqrt(6 / fan_in)``."""
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
