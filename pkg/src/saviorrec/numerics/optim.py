"""Adagrad with a linearly interpolated learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError
from .tensor import Tensor


@dataclass
class AdagradState:
    lr_start: float = 0.01
    lr_end: float = 0.001
    horizon: int = 1000
    eps: float = 1e-10
    step: int = 0
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        """Learning rate for the next step, moving linearly from start to end over ``horizon`` steps."""
        if self.horizon <= 0:
            return self.lr_end
        frac = min(self.step / self.horizon, 1.0)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


def adagrad_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
                 state: AdagradState) -> float:
    """Apply one Adagrad update in place and return the learning rate used.

    Raises DivergenceError before touching any parameter if a gradient is
    non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise DivergenceError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step}")
    lr = state.lr()
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p.data)
        acc += g * g
        p.data -= lr * g / (np.sqrt(acc) + state.eps)
    state.step += 1
    return lr


class Adagrad:
    """Stateful wrapper over :func:`adagrad_step` for a fixed parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr_start=0.01, lr_end=0.001, horizon=1000,
                 eps=1e-10):
        self.params = params
        self.state = AdagradState(lr_start=lr_start, lr_end=lr_end, horizon=horizon, eps=eps)

    def step(self) -> float:
        return adagrad_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
