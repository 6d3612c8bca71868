"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    probes: int
    worst_index: tuple[int, ...] | None
    analytic_at_worst: float
    numeric_at_worst: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e} "
                f"probes={self.probes} worst={self.worst_index}")


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    at,
    tol: float = 1e-4,
    eps: float = 1e-5,
    floor: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
    exclude: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare the gradient of scalar ``f`` at ``at`` with central differences.

    ``at`` is either an array (wrapped into a fresh leaf) or an existing leaf
    tensor that ``f`` closes over, such as a model parameter; in the latter
    case its data is perturbed in place and restored afterwards.

    The error at entry ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``;
    ``floor`` keeps near-zero gradients from turning round-off into huge
    relative errors. ``exclude`` maps the probe point to a boolean mask of
    entries to skip (e.g. ReLU inputs sitting exactly on the kink).
    """
    if isinstance(at, Tensor):
        leaf = at
        if not leaf.is_leaf:
            raise ValueError("can only probe leaf tensors")
        leaf.requires_grad = True
    else:
        leaf = Tensor(np.array(at, dtype=np.float64), requires_grad=True)
    if leaf.dtype != np.float64:
        raise ValueError("gradient checks require float64 tensors")

    first = f(leaf)
    if first.size != 1:
        raise ValueError("f must return a scalar")
    with no_grad():
        second = f(leaf)
    if not np.array_equal(first.data, second.data):
        raise ValueError("f is not deterministic: two evaluations at the same point differ")

    saved_grad = leaf.grad
    leaf.grad = None
    first.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    leaf.grad = saved_grad

    flat = leaf.data.reshape(-1)
    candidates = np.arange(flat.size)
    if exclude is not None:
        skip = np.asarray(exclude(leaf.data), dtype=bool).reshape(-1)
        candidates = candidates[~skip]
    if max_probes is not None and candidates.size > max_probes:
        rng = np.random.default_rng(seed)
        candidates = np.sort(rng.choice(candidates, size=max_probes, replace=False))

    worst, worst_i, worst_a, worst_n = 0.0, None, 0.0, 0.0
    with no_grad():
        for i in candidates:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(leaf).data)
            flat[i] = orig - eps
            down = float(f(leaf).data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst or worst_i is None:
                worst = err
                worst_i = tuple(int(v) for v in np.unravel_index(i, leaf.shape))
                worst_a, worst_n = ana, num
    return GradCheckReport(worst, tol, int(candidates.size), worst_i, worst_a, worst_n)
