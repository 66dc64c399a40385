"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None
                    ) -> dict[str, float]:
    """Return the norm-wise relative error per parameter.

    ``loss_fn`` must rebuild the graph on each call. With ``max_entries`` set,
    only that many randomly chosen entries of each parameter are perturbed.
    """
    for p in params.values():
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
    loss = loss_fn()
    backward(loss)
    errors = {}
    for name, p in params.items():
        analytic_full = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        numeric = np.empty(positions.size)
        for j, pos in enumerate(positions):
            original = flat[pos]
            flat[pos] = original + h
            up = loss_fn().item()
            flat[pos] = original - h
            down = loss_fn().item()
            flat[pos] = original
            numeric[j] = (up - down) / (2.0 * h)
        errors[name] = relative_error(analytic_full.reshape(-1)[positions], numeric)
    for p in params.values():
        p.grad = None
    return errors
